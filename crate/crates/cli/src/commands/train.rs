use std::path::{Path, PathBuf};

use clap::Args;
use hydra_core::checkpoint::ModelCheckpoint;
use hydra_core::data::{load_cube, HsiCube};
use hydra_core::student::{Student, StudentConfig};
use hydra_core::teacher::{Teacher, TeacherConfig};
use hydra_core::training::{
    loss_history_csv, train_stage1_spectra, train_stage2, train_stage3, Loss, Stage, StageConfig, TrainState,
};
use hydra_core::Error as CoreError;

use super::{create_dir, write_file};
use crate::dataset::{list_samples, load_pairs, select, Sample, Subset};
use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::settings::{parse_blocks, Settings};

/// One stage of the three-stage training pipeline.
#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Stage to run: 1 teacher autoencoder, 2 distillation, 3 refinement.
    #[arg(long)]
    stage: u8,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<String>,
    /// Run directory receiving stageN.hydt, loss_stageN.csv and the manifest.
    #[arg(long)]
    out: Option<String>,
    /// Input checkpoint; defaults to the previous stage's checkpoint in --out.
    #[arg(long)]
    from: Option<String>,
    /// Teacher latent size L (stage 1).
    #[arg(long)]
    latent: Option<usize>,
    /// Teacher first-level width (stage 1).
    #[arg(long)]
    teacher_width: Option<usize>,
    #[arg(long)]
    se_ratio: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    /// Use every k-th training pixel in stage 1.
    #[arg(long)]
    pixel_stride: Option<usize>,
    /// Student base width C (stage 2).
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Four comma-separated block counts.
    #[arg(long)]
    encoder_blocks: Option<String>,
    /// Three comma-separated block counts.
    #[arg(long)]
    decoder_blocks: Option<String>,
    #[arg(long)]
    ffn_expansion: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    /// huber, mae or mse.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    huber_delta: Option<f64>,
    /// Comma-separated parameter groups to freeze.
    #[arg(long)]
    frozen: Option<String>,
    /// Initialization and shuffling seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

pub fn checkpoint_name(stage: Stage) -> String {
    format!("stage{}.hydt", stage.number())
}

fn stage_config(args: &TrainArgs, stage: Stage, s: &mut Settings) -> Result<StageConfig> {
    let mut cfg = StageConfig::new(stage);
    let pairs = [
        ("epochs", "epochs", args.epochs.map(|v| v.to_string())),
        ("batch_size", "batch_size", args.batch_size.map(|v| v.to_string())),
        ("lr", "learning_rate", args.lr.map(|v| v.to_string())),
        ("min_lr", "min_learning_rate", args.min_lr.map(|v| v.to_string())),
        ("seed", "seed", args.seed.map(|v| v.to_string())),
        ("loss", "loss", args.loss.clone()),
        ("frozen", "frozen", args.frozen.clone()),
    ];
    for (key, core_key, flag) in pairs {
        if let Some(v) = s.text(key, flag) {
            cfg.set(core_key, &v)?;
        }
    }
    if let Some(delta) = s.opt("huber_delta", args.huber_delta)? {
        if !matches!(cfg.loss, Loss::Huber(_)) {
            return Err(CliError::Config(format!("huber-delta needs loss huber, got {}", cfg.loss)));
        }
        cfg.loss = Loss::Huber(delta);
    }
    cfg.validate()?;
    s.record("epochs", cfg.epochs);
    s.record("batch_size", cfg.batch_size);
    s.record("lr", cfg.learning_rate);
    s.record("min_lr", cfg.min_learning_rate);
    s.record("seed", cfg.seed);
    s.record("loss", cfg.loss);
    if let Loss::Huber(d) = cfg.loss {
        s.record("huber_delta", d);
    }
    s.record("frozen", cfg.frozen.join(","));
    Ok(cfg)
}

/// Loads the previous stage's checkpoint, failing with a pipeline-order error
/// when it is absent or belongs to another stage.
fn prerequisite(stage: Stage, path: &Path) -> Result<ModelCheckpoint> {
    let prev = stage.number() - 1;
    if !path.is_file() {
        return Err(CoreError::Pipeline(format!(
            "stage {prev} checkpoint required, {} does not exist",
            path.display()
        ))
        .into());
    }
    let ck = ModelCheckpoint::load(path)?;
    if ck.stage.number() != prev {
        return Err(CoreError::Pipeline(format!(
            "stage {prev} checkpoint required, {} holds stage {}",
            path.display(),
            ck.stage
        ))
        .into());
    }
    Ok(ck)
}

fn check_bands(teacher: &Teacher, samples: &[Sample], cubes: &[HsiCube]) -> Result<()> {
    let b = teacher.config().bands;
    for (sample, cube) in samples.iter().zip(cubes) {
        if cube.bands() != b {
            return Err(CliError::Config(format!(
                "{} has {} bands but the checkpoint expects {b}",
                sample.cube_path.display(),
                cube.bands()
            )));
        }
    }
    Ok(())
}

fn student_config(args: &TrainArgs, latent: usize, s: &mut Settings) -> Result<StudentConfig> {
    let mut cfg = StudentConfig::new(latent);
    cfg.base_width = s.get("width", args.width, cfg.base_width)?;
    cfg.heads = s.get("heads", args.heads, cfg.heads)?;
    cfg.ffn_expansion = s.get("ffn_expansion", args.ffn_expansion, cfg.ffn_expansion)?;
    let enc = s
        .text("encoder_blocks", args.encoder_blocks.clone())
        .unwrap_or_else(|| join(&cfg.encoder_blocks));
    cfg.encoder_blocks = parse_blocks("encoder_blocks", &enc)?;
    let dec = s
        .text("decoder_blocks", args.decoder_blocks.clone())
        .unwrap_or_else(|| join(&cfg.decoder_blocks));
    cfg.decoder_blocks = parse_blocks("decoder_blocks", &dec)?;
    s.record("encoder_blocks", enc);
    s.record("decoder_blocks", dec);
    cfg.validate()?;
    Ok(cfg)
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn run(args: TrainArgs, settings: Settings) -> Result<()> {
    let stage = Stage::from_number(args.stage as u64)?;
    let mut s = settings.scoped(stage.number());
    s.record("stage", stage);
    let data = PathBuf::from(s.require::<String>("data", args.data.clone())?);
    let out = PathBuf::from(s.require::<String>("out", args.out.clone())?);
    let cfg = stage_config(&args, stage, &mut s)?;
    let val_fraction = s.get("val_fraction", args.val_fraction, 0.25)?;
    let split_seed = s.get("split_seed", args.split_seed, 0u64)?;
    let mut manifest = Manifest::new(format!("train --stage {}", stage.number()));

    let input = match stage {
        Stage::Autoencode => {
            if args.from.is_some() {
                return Err(CliError::Config("stage 1 starts from scratch and takes no --from".into()));
            }
            None
        }
        _ => {
            let prev = Stage::from_number(stage.number() as u64 - 1)?;
            let path = match s.text("from", args.from.clone()) {
                Some(p) => PathBuf::from(p),
                None => out.join(checkpoint_name(prev)),
            };
            s.record("from", path.display());
            let ck = prerequisite(stage, &path)?;
            manifest.input(&path);
            Some(ck)
        }
    };

    let samples = select(list_samples(&data)?, Subset::Train, val_fraction, split_seed)?;
    for sample in &samples {
        manifest.input(&sample.cube_path);
        if stage != Stage::Autoencode {
            manifest.input(&sample.rgb_path);
        }
    }
    create_dir(&out)?;
    let ckpt_path = out.join(checkpoint_name(stage));

    let result = match input {
        Some(ck) if cfg.epochs == 0 => ck,
        Some(mut ck) => {
            let pairs = load_pairs(&samples)?;
            let cubes: Vec<HsiCube> = pairs.iter().map(|(_, c)| c.clone()).collect();
            check_bands(&ck.teacher, &samples, &cubes)?;
            let mut state = TrainState::new(stage);
            let student = match (stage, ck.student.take()) {
                (Stage::Distill, _) => {
                    let scfg = student_config(&args, ck.teacher.config().latent, &mut s)?;
                    let mut student = Student::new(scfg, cfg.seed)?;
                    train_stage2(&mut student, &ck.teacher, &pairs, &cfg, &mut state)?;
                    student
                }
                (_, Some(mut student)) => {
                    train_stage3(&mut student, &mut ck.teacher, &pairs, &cfg, &mut state)?;
                    student
                }
                (_, None) => return Err(CoreError::Pipeline("stage 2 checkpoint has no student".into()).into()),
            };
            ModelCheckpoint {
                stage,
                teacher: ck.teacher,
                student: Some(student),
                train_state: Some(state),
            }
        }
        None => {
            let cubes = samples
                .iter()
                .map(|sm| load_cube(&sm.cube_path))
                .collect::<hydra_core::Result<Vec<_>>>()?;
            let bands = cubes.first().map(HsiCube::bands).unwrap_or(0);
            let mut tcfg = TeacherConfig::new(bands, s.get("latent", args.latent, 8)?)?;
            tcfg.base_width = s.get("teacher_width", args.teacher_width, tcfg.base_width)?;
            tcfg.se_ratio = s.get("se_ratio", args.se_ratio, tcfg.se_ratio)?;
            tcfg.kernel = s.get("kernel", args.kernel, tcfg.kernel)?;
            s.record("bands", bands);
            let mut teacher = Teacher::new(tcfg, cfg.seed)?;
            check_bands(&teacher, &samples, &cubes)?;
            let stride = s.get("pixel_stride", args.pixel_stride, 1usize)?;
            if stride == 0 {
                return Err(CliError::Config("pixel stride must be positive".into()));
            }
            let spectra: Vec<f64> = cubes
                .iter()
                .flat_map(|c| c.data().chunks(bands))
                .step_by(stride)
                .flatten()
                .copied()
                .collect();
            let mut state = TrainState::new(stage);
            train_stage1_spectra(&mut teacher, &spectra, &cfg, &mut state)?;
            ModelCheckpoint {
                stage,
                teacher,
                student: None,
                train_state: Some(state),
            }
        }
    };

    result.save(&ckpt_path)?;
    manifest.output(&ckpt_path);
    let history = result
        .train_state
        .as_ref()
        .filter(|st| st.stage == stage)
        .map(|st| st.history.as_slice())
        .unwrap_or_default();
    let loss_path = out.join(format!("loss_stage{}.csv", stage.number()));
    write_file(&loss_path, loss_history_csv(history))?;
    manifest.output(&loss_path);
    manifest.write(s.resolved(), &out.join(format!("stage{}.manifest.json", stage.number())))?;
    match history.last() {
        Some(last) => println!("stage {stage}: {} epochs, final loss {}", history.len(), last.loss),
        None => println!("stage {stage}: no epochs run"),
    }
    Ok(())
}
