//! Three-stage training: teacher autoencoding (Huber), distillation of the
//! frozen teacher's latents into the student (MAE), and joint refinement of
//! the student and teacher decoder through the decoded spectra (MSE).
//!
//! Shuffling is reseeded from `(seed, stage, epoch)` at every epoch, so a
//! [`TrainState`] holding the epoch counter, optimizer moments and loss history
//! is all that is needed to resume bit-exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{HsiCube, RgbImage};
use crate::error::{ensure, Error, Result};
use crate::params::{in_group, ParamStore};
use crate::student::{Student, STUDENT_GROUP};
use crate::teacher::{Teacher, DECODER_GROUP, ENCODER_GROUP};
use crate::tensor::{Graph, Tensor, Var};

pub const TEACHER_GROUP: &str = "teacher";
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Autoencode = 1,
    Distill = 2,
    Refine = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Autoencode, Stage::Distill, Stage::Refine];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u64) -> Result<Self> {
        match n {
            1 => Ok(Stage::Autoencode),
            2 => Ok(Stage::Distill),
            3 => Ok(Stage::Refine),
            _ => Err(Error::Config(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn default_loss(self) -> Loss {
        match self {
            Stage::Autoencode => Loss::Huber(1.0),
            Stage::Distill => Loss::Mae,
            Stage::Refine => Loss::Mse,
        }
    }

    /// Groups that must stay frozen for this stage.
    pub fn required_frozen(self) -> &'static [&'static str] {
        match self {
            Stage::Autoencode => &[],
            Stage::Distill => &[TEACHER_GROUP],
            Stage::Refine => &[ENCODER_GROUP],
        }
    }

    pub fn default_frozen(self) -> Vec<String> {
        match self {
            Stage::Autoencode => vec![STUDENT_GROUP.to_owned()],
            Stage::Distill => vec![TEACHER_GROUP.to_owned()],
            Stage::Refine => vec![ENCODER_GROUP.to_owned()],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Loss {
    Huber(f64),
    Mae,
    Mse,
}

impl Loss {
    /// Graph form: mean elementwise penalty of `pred − target`, scaled by
    /// `weight` (the share of the batch this term covers).
    fn apply(self, g: &mut Graph, pred: Var, target: Var, weight: f64) -> Result<Var> {
        let diff = g.sub(pred, target)?;
        let per = match self {
            Loss::Huber(delta) => g.huber(diff, delta)?,
            Loss::Mae => g.abs(diff)?,
            Loss::Mse => g.square(diff)?,
        };
        let mean = g.mean(per)?;
        if weight == 1.0 {
            Ok(mean)
        } else {
            g.scale(mean, weight)
        }
    }

    /// Value form over flat slices.
    pub fn evaluate(self, pred: &[f64], target: &[f64]) -> Result<f64> {
        ensure!(
            pred.len() == target.len() && !pred.is_empty(),
            Dimension,
            "loss needs equal nonempty inputs, got {} and {}",
            pred.len(),
            target.len()
        );
        let total: f64 = pred
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let e = p - t;
                match self {
                    Loss::Huber(delta) if e.abs() <= delta => 0.5 * e * e,
                    Loss::Huber(delta) => delta * (e.abs() - 0.5 * delta),
                    Loss::Mae => e.abs(),
                    Loss::Mse => e * e,
                }
            })
            .sum();
        Ok(total / pred.len() as f64)
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loss::Huber(_) => f.write_str("huber"),
            Loss::Mae => f.write_str("mae"),
            Loss::Mse => f.write_str("mse"),
        }
    }
}

pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64) -> Result<f64> {
    ensure!(delta > 0.0, Config, "huber delta must be positive, got {delta}");
    Loss::Huber(delta).evaluate(pred, target)
}

pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    Loss::Mae.evaluate(pred, target)
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    Loss::Mse.evaluate(pred, target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Spectra per batch in stage 1, images per batch in stages 2 and 3.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Floor of the per-epoch cosine schedule.
    pub min_learning_rate: f64,
    pub loss: Loss,
    pub frozen: Vec<String>,
    pub seed: u64,
    /// Ends the run after this many completed epochs while keeping the
    /// schedule of the full `epochs`, leaving a resumable state.
    pub stop_after: Option<usize>,
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            epochs: 10,
            batch_size: if stage == Stage::Autoencode { 64 } else { 4 },
            learning_rate: 4e-4,
            min_learning_rate: 1e-6,
            loss: stage.default_loss(),
            frozen: stage.default_frozen(),
            seed: 0,
            stop_after: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning rate must be positive, got {}",
            self.learning_rate
        );
        ensure!(
            self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate,
            Config,
            "minimum learning rate {} must lie in [0, {}]",
            self.min_learning_rate,
            self.learning_rate
        );
        if let Loss::Huber(delta) = self.loss {
            ensure!(delta > 0.0, Config, "huber delta must be positive, got {delta}");
        }
        for group in self.stage.required_frozen() {
            ensure!(
                self.frozen.iter().any(|f| in_group(group, f)),
                Config,
                "stage {} requires {group} to be frozen",
                self.stage
            );
        }
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|f| in_group(name, f))
    }

    /// Cosine decay from `learning_rate` at epoch 0 toward `min_learning_rate`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let t = epoch as f64 / self.epochs as f64;
        self.min_learning_rate + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (PI * t).cos())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "stage" => {
                self.stage = Stage::from_number(num(key, value)?)?;
            }
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "min_learning_rate" => self.min_learning_rate = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "stop_after" => self.stop_after = Some(num(key, value)?),
            "loss" => {
                self.loss = match value {
                    "huber" => Loss::Huber(match self.loss {
                        Loss::Huber(d) => d,
                        _ => 1.0,
                    }),
                    "mae" => Loss::Mae,
                    "mse" => Loss::Mse,
                    other => return Err(Error::Config(format!("unknown loss {other:?}"))),
                }
            }
            "huber_delta" => self.loss = Loss::Huber(num(key, value)?),
            "frozen" => {
                self.frozen = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_owned)
                    .collect()
            }
            other => return Err(Error::Config(format!("unknown stage config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. A `stage` key, if
    /// present, must come first since it resets the stage defaults.
    pub fn parse(text: &str, default_stage: Stage) -> Result<Self> {
        let mut cfg = Self::new(default_stage);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "stage" {
                let stage = Stage::from_number(
                    value
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid stage {value:?}")))?,
                )?;
                if stage != cfg.stage {
                    cfg = Self::new(stage);
                }
                continue;
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "stage = {}", self.stage).unwrap();
        writeln!(out, "epochs = {}", self.epochs).unwrap();
        writeln!(out, "batch_size = {}", self.batch_size).unwrap();
        writeln!(out, "learning_rate = {}", self.learning_rate).unwrap();
        writeln!(out, "min_learning_rate = {}", self.min_learning_rate).unwrap();
        writeln!(out, "loss = {}", self.loss).unwrap();
        if let Loss::Huber(d) = self.loss {
            writeln!(out, "huber_delta = {d}").unwrap();
        }
        writeln!(out, "frozen = {}", self.frozen.join(",")).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        if let Some(k) = self.stop_after {
            writeln!(out, "stop_after = {k}").unwrap();
        }
        out
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

/// Adaptive-moment optimizer state keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub moments: BTreeMap<String, Moments>,
}

/// One bias-corrected adaptive-moment update. Parameters whose gradient is
/// `None` or whose name lies in a `frozen` group are left untouched, moments
/// included.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
    frozen: &[String],
) -> Result<()> {
    ensure!(
        grads.len() == params.len(),
        Contract,
        "{} gradients for {} parameters",
        grads.len(),
        params.len()
    );
    let ids: Vec<_> = params.ids().collect();
    for (id, grad) in ids.into_iter().zip(grads) {
        let Some(grad) = grad else { continue };
        let name = params.name(id).to_owned();
        if frozen.iter().any(|f| in_group(&name, f)) {
            continue;
        }
        let param = params.get_mut(id);
        ensure!(
            grad.shape() == param.shape(),
            Contract,
            "gradient shape {:?} does not match parameter {name} {:?}",
            grad.shape(),
            param.shape()
        );
        let entry = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            step: 0,
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
        });
        ensure!(
            entry.m.shape() == param.shape() && entry.v.shape() == param.shape(),
            Contract,
            "moment buffers of {name} have shape {:?}, parameter has {:?}",
            entry.m.shape(),
            param.shape()
        );
        entry.step += 1;
        let c1 = 1.0 - BETA1.powi(entry.step as i32);
        let c2 = 1.0 - BETA2.powi(entry.step as i32);
        let (m, v) = (entry.m.data_mut(), entry.v.data_mut());
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,stage,loss";

pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in history {
        writeln!(out, "{},{},{}", r.epoch, r.stage, r.loss).unwrap();
    }
    out
}

pub fn parse_loss_history_csv(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines();
    ensure!(
        lines.next() == Some(LOSS_CSV_HEADER),
        Malformed,
        "loss history must start with {LOSS_CSV_HEADER:?}"
    );
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::Malformed(format!("bad loss history row {line:?}"));
            let mut f = line.split(',');
            let epoch = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let stage = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let loss = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            Ok(LossRecord {
                epoch,
                stage: Stage::from_number(stage)?,
                loss,
            })
        })
        .collect()
}

/// Everything needed to resume a stage: completed epochs, optimizer moments
/// and the loss history so far.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub epoch: usize,
    pub adam: AdamState,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            epoch: 0,
            adam: AdamState::default(),
            history: Vec::new(),
        }
    }
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = stage.number();
    key[16..24].copy_from_slice(&(epoch as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Gradients for each parameter store touched by an objective.
type StoreGrads = Vec<Vec<Option<Tensor>>>;

trait Objective {
    fn items(&self) -> usize;
    /// Mean loss over the batch and its gradients, one list per store.
    fn batch(&self, indices: &[usize]) -> Result<(f64, StoreGrads)>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;
}

fn add_grads(acc: &mut StoreGrads, other: StoreGrads) {
    for (a_store, o_store) in acc.iter_mut().zip(other) {
        for (a, o) in a_store.iter_mut().zip(o_store) {
            match (a.as_mut(), o) {
                (Some(a), Some(o)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(o.data()) {
                        *x += y;
                    }
                }
                (None, Some(o)) => *a = Some(o),
                (_, None) => {}
            }
        }
    }
}

fn with_batch_context(e: Error, stage: Stage, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("stage {stage}, epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

fn run_epochs(obj: &mut impl Objective, cfg: &StageConfig, state: &mut TrainState) -> Result<()> {
    cfg.validate()?;
    ensure!(
        state.stage == cfg.stage,
        Config,
        "train state belongs to stage {} but the config is for stage {}",
        state.stage,
        cfg.stage
    );
    let n = obj.items();
    ensure!(n > 0, Config, "stage {} has no training data", cfg.stage);
    let end = cfg.stop_after.map_or(cfg.epochs, |k| k.min(cfg.epochs));
    while state.epoch < end {
        let epoch = state.epoch;
        let lr = cfg.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, cfg.stage, epoch));
        let mut weighted = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = obj
                .batch(batch)
                .map_err(|e| with_batch_context(e, cfg.stage, epoch, b))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "stage {}, epoch {epoch}, batch {b}: loss is {loss}",
                    cfg.stage
                )));
            }
            weighted += loss * batch.len() as f64;
            for (store, g) in obj.stores_mut().into_iter().zip(&grads) {
                optimizer_step(store, g, &mut state.adam, lr, &cfg.frozen)?;
            }
        }
        state.history.push(LossRecord {
            epoch,
            stage: cfg.stage,
            loss: weighted / n as f64,
        });
        state.epoch += 1;
    }
    Ok(())
}

/// Digests of every frozen group present in `store`.
fn frozen_digests(store: &ParamStore, frozen: &[String]) -> Vec<(String, String)> {
    frozen
        .iter()
        .filter(|f| store.iter().any(|(n, _)| in_group(n, f)))
        .map(|f| (f.clone(), store.digest(f)))
        .collect()
}

fn check_frozen(store: &ParamStore, before: &[(String, String)]) -> Result<()> {
    for (group, digest) in before {
        if store.digest(group) != *digest {
            return Err(Error::FreezeViolation(format!("frozen group {group} changed during training")));
        }
    }
    Ok(())
}

struct AutoencodeObjective<'a> {
    teacher: &'a mut Teacher,
    spectra: &'a [f64],
    cfg: &'a StageConfig,
}

impl Objective for AutoencodeObjective<'_> {
    fn items(&self) -> usize {
        self.spectra.len() / self.teacher.config().bands
    }

    fn batch(&self, indices: &[usize]) -> Result<(f64, StoreGrads)> {
        let b = self.teacher.config().bands;
        let mut rows = Vec::with_capacity(indices.len() * b);
        for &i in indices {
            rows.extend_from_slice(&self.spectra[i * b..(i + 1) * b]);
        }
        let mut g = Graph::new();
        let bound = self.teacher.params().bind(&mut g, |n| !self.cfg.is_frozen(n));
        let x = g.constant(Tensor::new(vec![indices.len(), b], rows)?);
        let z = self.teacher.encode(&mut g, &bound, x)?;
        let y = self.teacher.decode(&mut g, &bound, z)?;
        let loss = self.cfg.loss.apply(&mut g, y, x, 1.0)?;
        g.backward(loss)?;
        Ok((g.value(loss).item(), vec![bound.grads(&g)]))
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self.teacher.params_mut()]
    }
}

/// Stage 1 over row-major spectra `[n, B]`.
pub fn train_stage1_spectra(teacher: &mut Teacher, spectra: &[f64], cfg: &StageConfig, state: &mut TrainState) -> Result<()> {
    ensure!(cfg.stage == Stage::Autoencode, Config, "stage 1 training needs a stage 1 config, got stage {}", cfg.stage);
    let b = teacher.config().bands;
    ensure!(
        !spectra.is_empty() && spectra.len().is_multiple_of(b),
        Dimension,
        "{} values do not form spectra of {b} bands",
        spectra.len()
    );
    let before = frozen_digests(teacher.params(), &cfg.frozen);
    run_epochs(
        &mut AutoencodeObjective {
            teacher: &mut *teacher,
            spectra,
            cfg,
        },
        cfg,
        state,
    )?;
    check_frozen(teacher.params(), &before)
}

/// Stage 1 over every pixel of `cubes`.
pub fn train_stage1(teacher: &mut Teacher, cubes: &[HsiCube], cfg: &StageConfig, state: &mut TrainState) -> Result<()> {
    let b = teacher.config().bands;
    let mut spectra = Vec::new();
    for cube in cubes {
        ensure!(
            cube.bands() == b,
            Config,
            "cube has {} bands but the teacher expects {b}",
            cube.bands()
        );
        spectra.extend_from_slice(cube.data());
    }
    train_stage1_spectra(teacher, &spectra, cfg, state)
}

/// An RGB image and its channel-first graph input.
struct Sample {
    rgb: Tensor,
    target: Tensor,
}

fn rgb_tensor(image: &RgbImage) -> Result<Tensor> {
    Tensor::new(vec![3, image.height(), image.width()], image.to_channel_first())
}

/// Per-image losses in parallel, reduced in index order.
fn parallel_batch(
    samples: &[Sample],
    indices: &[usize],
    per_image: impl Fn(&Sample, f64) -> Result<(f64, StoreGrads)> + Sync,
) -> Result<(f64, StoreGrads)> {
    let total: usize = indices.iter().map(|&i| samples[i].target.len()).sum();
    let parts: Vec<Result<(f64, StoreGrads)>> = indices
        .par_iter()
        .map(|&i| per_image(&samples[i], samples[i].target.len() as f64 / total as f64))
        .collect();
    let mut loss = 0.0;
    let mut acc: Option<StoreGrads> = None;
    for part in parts {
        let (l, grads) = part?;
        loss += l;
        match acc.as_mut() {
            Some(a) => add_grads(a, grads),
            None => acc = Some(grads),
        }
    }
    Ok((loss, acc.unwrap_or_default()))
}

/// Frozen-teacher latent targets for each cube.
pub fn distillation_targets(teacher: &Teacher, pairs: &[(RgbImage, HsiCube)]) -> Result<Vec<Tensor>> {
    let l = teacher.config().latent;
    pairs
        .iter()
        .map(|(_, cube)| {
            let latent = teacher.encode_cube(cube)?;
            Tensor::new(vec![l, cube.height(), cube.width()], latent.to_channel_first())
        })
        .collect()
}

fn check_pairs(pairs: &[(RgbImage, HsiCube)], bands: usize) -> Result<()> {
    ensure!(!pairs.is_empty(), Config, "no training pairs");
    for (rgb, cube) in pairs {
        ensure!(
            rgb.height() == cube.height() && rgb.width() == cube.width(),
            Dimension,
            "RGB image {}x{} does not match its cube {}x{}",
            rgb.height(),
            rgb.width(),
            cube.height(),
            cube.width()
        );
        ensure!(
            cube.bands() == bands,
            Config,
            "cube has {} bands but the teacher expects {bands}",
            cube.bands()
        );
    }
    Ok(())
}

struct DistillObjective<'a> {
    student: &'a mut Student,
    samples: Vec<Sample>,
    cfg: &'a StageConfig,
}

impl Objective for DistillObjective<'_> {
    fn items(&self) -> usize {
        self.samples.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<(f64, StoreGrads)> {
        let student = &*self.student;
        parallel_batch(&self.samples, indices, |s, weight| {
            let mut g = Graph::new();
            let bound = student.params().bind(&mut g, |n| !self.cfg.is_frozen(n));
            let x = g.constant(s.rgb.clone());
            let out = student.forward(&mut g, &bound, x)?;
            let target = g.constant(s.target.clone());
            let loss = self.cfg.loss.apply(&mut g, out.latent, target, weight)?;
            g.backward(loss)?;
            Ok((g.value(loss).item(), vec![bound.grads(&g)]))
        })
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self.student.params_mut()]
    }
}

/// Stage 2: fits the student to the frozen teacher's latent codes.
pub fn train_stage2(
    student: &mut Student,
    teacher: &Teacher,
    pairs: &[(RgbImage, HsiCube)],
    cfg: &StageConfig,
    state: &mut TrainState,
) -> Result<()> {
    ensure!(cfg.stage == Stage::Distill, Config, "stage 2 training needs a stage 2 config, got stage {}", cfg.stage);
    ensure!(
        student.config().latent == teacher.config().latent,
        Config,
        "student latent size {} differs from teacher latent size {}",
        student.config().latent,
        teacher.config().latent
    );
    check_pairs(pairs, teacher.config().bands)?;
    let teacher_digest = teacher.params().digest(TEACHER_GROUP);
    let targets = distillation_targets(teacher, pairs)?;
    let samples = pairs
        .iter()
        .zip(targets)
        .map(|((rgb, _), target)| Ok(Sample { rgb: rgb_tensor(rgb)?, target }))
        .collect::<Result<Vec<_>>>()?;
    let before = frozen_digests(student.params(), &cfg.frozen);
    run_epochs(
        &mut DistillObjective {
            student: &mut *student,
            samples,
            cfg,
        },
        cfg,
        state,
    )?;
    check_frozen(student.params(), &before)?;
    if teacher.params().digest(TEACHER_GROUP) != teacher_digest {
        return Err(Error::FreezeViolation("teacher changed during stage 2".into()));
    }
    Ok(())
}

struct RefineObjective<'a> {
    student: &'a mut Student,
    teacher: &'a mut Teacher,
    samples: Vec<Sample>,
    cfg: &'a StageConfig,
}

impl Objective for RefineObjective<'_> {
    fn items(&self) -> usize {
        self.samples.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<(f64, StoreGrads)> {
        let (student, teacher) = (&*self.student, &*self.teacher);
        let latent = student.config().latent;
        parallel_batch(&self.samples, indices, |s, weight| {
            let mut g = Graph::new();
            let sb = student.params().bind(&mut g, |n| !self.cfg.is_frozen(n));
            let tb = teacher.params().bind(&mut g, |n| !self.cfg.is_frozen(n));
            let x = g.constant(s.rgb.clone());
            let out = student.forward(&mut g, &sb, x)?;
            let pixels = s.rgb.shape()[1] * s.rgb.shape()[2];
            let codes = g.reshape(out.latent, &[latent, pixels])?;
            let codes = g.transpose(codes)?;
            let spectra = teacher.decode(&mut g, &tb, codes)?;
            let target = g.constant(s.target.clone());
            let loss = self.cfg.loss.apply(&mut g, spectra, target, weight)?;
            g.backward(loss)?;
            Ok((g.value(loss).item(), vec![sb.grads(&g), tb.grads(&g)]))
        })
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self.student.params_mut(), self.teacher.params_mut()]
    }
}

/// Stage 3: end-to-end MSE through the teacher decoder; the teacher encoder
/// stays frozen.
pub fn train_stage3(
    student: &mut Student,
    teacher: &mut Teacher,
    pairs: &[(RgbImage, HsiCube)],
    cfg: &StageConfig,
    state: &mut TrainState,
) -> Result<()> {
    ensure!(cfg.stage == Stage::Refine, Config, "stage 3 training needs a stage 3 config, got stage {}", cfg.stage);
    ensure!(
        student.config().latent == teacher.config().latent,
        Config,
        "student latent size {} differs from teacher latent size {}",
        student.config().latent,
        teacher.config().latent
    );
    check_pairs(pairs, teacher.config().bands)?;
    let bands = teacher.config().bands;
    let samples = pairs
        .iter()
        .map(|(rgb, cube)| {
            Ok(Sample {
                rgb: rgb_tensor(rgb)?,
                target: Tensor::new(vec![cube.num_pixels(), bands], cube.data().to_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let student_before = frozen_digests(student.params(), &cfg.frozen);
    let teacher_before = frozen_digests(teacher.params(), &cfg.frozen);
    run_epochs(
        &mut RefineObjective {
            student: &mut *student,
            teacher: &mut *teacher,
            samples,
            cfg,
        },
        cfg,
        state,
    )?;
    check_frozen(student.params(), &student_before)?;
    check_frozen(teacher.params(), &teacher_before)
}

/// Full RGB → spectrum reconstruction: student latents decoded by the teacher.
pub fn reconstruct(student: &Student, teacher: &Teacher, image: &RgbImage) -> Result<HsiCube> {
    ensure!(
        student.config().latent == teacher.config().latent,
        Config,
        "student latent size {} differs from teacher latent size {}",
        student.config().latent,
        teacher.config().latent
    );
    teacher.decode_cube(&student.predict(image)?)
}

/// Digest of the teacher decoder, exposed for freeze checks by callers.
pub fn decoder_digest(teacher: &Teacher) -> String {
    teacher.params().digest(DECODER_GROUP)
}
