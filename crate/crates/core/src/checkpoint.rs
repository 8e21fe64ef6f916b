//! `HYDT` parameter container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "HYDT" | version u32 | section_count u32
//! section: tag_len u32 | tag bytes | record_count u32 | records
//! record:  name_len u32 | name bytes | ndim u32 | dims u32 × ndim | f64 × numel
//! ```
//!
//! Sections are tagged `teacher`, `student`, `meta` (configs and stage) and
//! `optim` (resumable training state).

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::student::{Student, StudentConfig, LEVELS};
use crate::teacher::{Teacher, TeacherConfig};
use crate::tensor::Tensor;
use crate::training::{AdamState, LossRecord, Moments, Stage, TrainState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HYDT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const TEACHER_TAG: &str = "teacher";
pub const STUDENT_TAG: &str = "student";
pub const META_TAG: &str = "meta";
pub const OPTIM_TAG: &str = "optim";

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: String,
    pub records: Vec<(String, Tensor)>,
}

impl Section {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            records: Vec::new(),
        }
    }

    pub fn from_params(tag: impl Into<String>, params: &ParamStore) -> Self {
        Self {
            tag: tag.into(),
            records: params.iter().map(|(n, t)| (n.to_owned(), t.clone())).collect(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.records.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Malformed(format!("section {} lacks record {name}", self.tag)))
    }

    fn integers(&self, name: &str) -> Result<Vec<u64>> {
        self.require(name)?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
                    Ok(v as u64)
                } else {
                    Err(Error::Malformed(format!("record {name} holds non-integer value {v}")))
                }
            })
            .collect()
    }

    fn integer(&self, name: &str) -> Result<u64> {
        let v = self.integers(name)?;
        ensure!(v.len() == 1, Malformed, "record {name} must hold one value");
        Ok(v[0])
    }

    fn usize(&self, name: &str) -> Result<usize> {
        Ok(self.integer(name)? as usize)
    }

    fn push_int(&mut self, name: &str, v: usize) {
        self.push(name, Tensor::scalar(v as f64));
    }

    fn push_ints(&mut self, name: &str, v: &[usize]) {
        self.push(name, Tensor::from_vec(v.iter().map(|&x| x as f64).collect()));
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    put_u32(out, s.len(), what)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "{what} needs {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section(&self, tag: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.tag == tag)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, self.sections.len(), "section count")?;
        for s in &self.sections {
            put_str(&mut out, &s.tag, "tag length")?;
            put_u32(&mut out, s.records.len(), "record count")?;
            for (name, t) in &s.records {
                put_str(&mut out, name, "name length")?;
                put_u32(&mut out, t.shape().len(), "rank")?;
                for &d in t.shape() {
                    put_u32(&mut out, d, "dimension")?;
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let found: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if found != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found,
            });
        }
        let version = r.u32("version")? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n_sections = r.u32("section count")?;
        let mut sections: Vec<Section> = Vec::new();
        for _ in 0..n_sections {
            let tag = r.string("section tag")?;
            ensure!(
                sections.iter().all(|s| s.tag != tag),
                Malformed,
                "duplicate section {tag}"
            );
            let n_records = r.u32("record count")?;
            let mut section = Section::new(tag);
            for _ in 0..n_records {
                let name = r.string("record name")?;
                let rank = r.u32("rank")?;
                ensure!(rank >= 1, Malformed, "record {name} has rank 0");
                let mut shape = Vec::with_capacity(rank.min(16));
                for _ in 0..rank {
                    shape.push(r.u32("dimension")?);
                }
                let bytes_needed = shape
                    .iter()
                    .try_fold(8usize, |acc, &d| acc.checked_mul(d))
                    .ok_or_else(|| Error::DimensionOverflow(format!("record {name} with shape {shape:?} overflows")))?;
                let raw = r.take(bytes_needed, "record values")?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = Tensor::new(shape, data).map_err(|e| Error::Malformed(format!("record {name}: {e}")))?;
                ensure!(
                    section.get(&name).is_none(),
                    Malformed,
                    "duplicate record {name} in section {}",
                    section.tag
                );
                section.push(name, t);
            }
            sections.push(section);
        }
        ensure!(
            r.pos == bytes.len(),
            Malformed,
            "{} trailing bytes after the last section",
            bytes.len() - r.pos
        );
        Ok(Self { sections })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Models and training progress after a pipeline stage.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    /// Last completed stage.
    pub stage: Stage,
    pub teacher: Teacher,
    pub student: Option<Student>,
    pub train_state: Option<TrainState>,
}

fn load_params(params: &mut ParamStore, section: &Section) -> Result<()> {
    ensure!(
        section.records.len() == params.len(),
        Malformed,
        "section {} holds {} records, model has {} parameters",
        section.tag,
        section.records.len(),
        params.len()
    );
    params.load_from(section.records.iter().map(|(n, t)| (n.as_str(), t)))
}

impl ModelCheckpoint {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = Section::new(META_TAG);
        meta.push_int("stage", self.stage.number() as usize);
        let t = self.teacher.config();
        meta.push_int("teacher.bands", t.bands);
        meta.push_int("teacher.latent", t.latent);
        meta.push_int("teacher.base_width", t.base_width);
        meta.push_int("teacher.se_ratio", t.se_ratio);
        meta.push_int("teacher.kernel", t.kernel);
        let mut sections = vec![Section::from_params(TEACHER_TAG, self.teacher.params())];
        if let Some(student) = &self.student {
            let s = student.config();
            meta.push_int("student.latent", s.latent);
            meta.push_int("student.base_width", s.base_width);
            meta.push_int("student.heads", s.heads);
            meta.push_ints("student.encoder_blocks", &s.encoder_blocks);
            meta.push_ints("student.decoder_blocks", &s.decoder_blocks);
            meta.push_int("student.ffn_expansion", s.ffn_expansion);
            sections.push(Section::from_params(STUDENT_TAG, student.params()));
        }
        if let Some(state) = &self.train_state {
            sections.push(state_section(state));
        }
        sections.insert(0, meta);
        Checkpoint { sections }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck
            .section(META_TAG)
            .ok_or_else(|| Error::Malformed("checkpoint has no meta section".into()))?;
        let stage = Stage::from_number(meta.integer("stage")?)
            .map_err(|e| Error::Malformed(e.to_string()))?;
        let tcfg = TeacherConfig {
            bands: meta.usize("teacher.bands")?,
            latent: meta.usize("teacher.latent")?,
            base_width: meta.usize("teacher.base_width")?,
            se_ratio: meta.usize("teacher.se_ratio")?,
            kernel: meta.usize("teacher.kernel")?,
        };
        let mut teacher = Teacher::new(tcfg, 0)?;
        let tsec = ck
            .section(TEACHER_TAG)
            .ok_or_else(|| Error::Malformed("checkpoint has no teacher section".into()))?;
        load_params(teacher.params_mut(), tsec)?;

        let student = match ck.section(STUDENT_TAG) {
            None => None,
            Some(ssec) => {
                let blocks = |name: &str, n: usize| -> Result<Vec<usize>> {
                    let v = meta.integers(name)?;
                    ensure!(v.len() == n, Malformed, "record {name} must hold {n} values");
                    Ok(v.into_iter().map(|x| x as usize).collect())
                };
                let enc = blocks("student.encoder_blocks", LEVELS)?;
                let dec = blocks("student.decoder_blocks", LEVELS - 1)?;
                let scfg = StudentConfig {
                    latent: meta.usize("student.latent")?,
                    base_width: meta.usize("student.base_width")?,
                    heads: meta.usize("student.heads")?,
                    encoder_blocks: enc.try_into().unwrap(),
                    decoder_blocks: dec.try_into().unwrap(),
                    ffn_expansion: meta.usize("student.ffn_expansion")?,
                };
                let mut student = Student::new(scfg, 0)?;
                load_params(student.params_mut(), ssec)?;
                Some(student)
            }
        };
        let train_state = ck.section(OPTIM_TAG).map(read_state).transpose()?;
        Ok(Self {
            stage,
            teacher,
            student,
            train_state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn state_section(state: &TrainState) -> Section {
    let mut s = Section::new(OPTIM_TAG);
    s.push_int("stage", state.stage.number() as usize);
    s.push_int("epoch", state.epoch);
    if !state.history.is_empty() {
        let data = state
            .history
            .iter()
            .flat_map(|r| [r.epoch as f64, r.stage.number() as f64, r.loss])
            .collect();
        s.push("history", Tensor::new(vec![state.history.len(), 3], data).expect("history shape"));
    }
    for (name, m) in &state.adam.moments {
        s.push(format!("step.{name}"), Tensor::scalar(m.step as f64));
        s.push(format!("m.{name}"), m.m.clone());
        s.push(format!("v.{name}"), m.v.clone());
    }
    s
}

fn read_state(s: &Section) -> Result<TrainState> {
    let stage = Stage::from_number(s.integer("stage")?).map_err(|e| Error::Malformed(e.to_string()))?;
    let epoch = s.usize("epoch")?;
    let mut history = Vec::new();
    if let Some(h) = s.get("history") {
        ensure!(
            h.shape().len() == 2 && h.shape()[1] == 3,
            Malformed,
            "loss history must be [n, 3], got {:?}",
            h.shape()
        );
        for row in h.data().chunks(3) {
            history.push(LossRecord {
                epoch: row[0] as usize,
                stage: Stage::from_number(row[1] as u64).map_err(|e| Error::Malformed(e.to_string()))?,
                loss: row[2],
            });
        }
    }
    let mut adam = AdamState::default();
    for (name, _) in &s.records {
        let Some(param) = name.strip_prefix("step.") else {
            continue;
        };
        let m = s.require(&format!("m.{param}"))?.clone();
        let v = s.require(&format!("v.{param}"))?.clone();
        ensure!(
            m.shape() == v.shape(),
            Malformed,
            "moment buffers of {param} disagree in shape"
        );
        adam.moments.insert(
            param.to_owned(),
            Moments {
                step: s.integer(name)?,
                m,
                v,
            },
        );
    }
    Ok(TrainState {
        stage,
        epoch,
        adam,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let mut s = Section::new("x");
        s.push("a", Tensor::from_vec(vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]));
        s.push("b", Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ck = Checkpoint { sections: vec![s] };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        for ((_, a), (_, b)) in ck.sections[0].records.iter().zip(&back.sections[0].records) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(a.shape(), b.shape());
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let mut s = Section::new("x");
        s.push("a", Tensor::from_vec(vec![1.0, 2.0]));
        let bytes = Checkpoint { sections: vec![s] }.to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::UnsupportedVersion(9))));

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));

        let mut bad = bytes.clone();
        let dim_at = bytes.len() - 16 - 4;
        bad[dim_at..dim_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = Checkpoint::from_bytes(&bad);
        assert!(matches!(err, Err(Error::DimensionOverflow(_) | Error::Truncated(_))), "{err:?}");

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Malformed(_))));
    }

    #[test]
    fn model_checkpoint_restores_models_and_state() {
        let teacher = Teacher::new(TeacherConfig::new(16, 4).unwrap(), 5).unwrap();
        let mut scfg = StudentConfig::new(4);
        scfg.base_width = 4;
        scfg.heads = 1;
        let student = Student::new(scfg, 6).unwrap();
        let mut state = TrainState::new(Stage::Distill);
        state.epoch = 3;
        state.history.push(LossRecord {
            epoch: 0,
            stage: Stage::Distill,
            loss: 0.25,
        });
        state.adam.moments.insert(
            "student.embed.bias".into(),
            Moments {
                step: 7,
                m: Tensor::full(&[4], 0.5),
                v: Tensor::full(&[4], 0.125),
            },
        );
        let mc = ModelCheckpoint {
            stage: Stage::Distill,
            teacher,
            student: Some(student),
            train_state: Some(state),
        };
        let bytes = mc.to_checkpoint().to_bytes().unwrap();
        let back = ModelCheckpoint::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.stage, Stage::Distill);
        assert_eq!(back.teacher.params(), mc.teacher.params());
        assert_eq!(back.teacher.config(), mc.teacher.config());
        let (a, b) = (back.student.unwrap(), mc.student.unwrap());
        assert_eq!(a.config(), b.config());
        assert_eq!(a.params(), b.params());
        assert_eq!(back.train_state, mc.train_state);
        assert_eq!(back_bytes(&bytes), bytes);
    }

    fn back_bytes(bytes: &[u8]) -> Vec<u8> {
        let mc = ModelCheckpoint::from_checkpoint(&Checkpoint::from_bytes(bytes).unwrap()).unwrap();
        mc.to_checkpoint().to_bytes().unwrap()
    }
}
