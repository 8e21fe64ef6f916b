use std::path::PathBuf;

use clap::Args;
use hydra_core::checkpoint::ModelCheckpoint;
use hydra_core::data::{load_rgb, save_cube};
use hydra_core::training::reconstruct;
use hydra_core::Error as CoreError;

use crate::error::Result;
use crate::manifest::Manifest;
use crate::settings::Settings;

/// Hyperspectral cube from one RGB image.
#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Checkpoint holding a trained student (stage 2 or 3).
    #[arg(long)]
    checkpoint: Option<String>,
    /// RGB image in HSIC format with 3 bands.
    #[arg(long)]
    input: Option<String>,
    /// Output cube path; values are clamped to [0, 1].
    #[arg(long)]
    out: Option<String>,
}

pub fn run(args: ReconstructArgs, mut s: Settings) -> Result<()> {
    let ckpt_path = PathBuf::from(s.require::<String>("checkpoint", args.checkpoint)?);
    let input = PathBuf::from(s.require::<String>("input", args.input)?);
    let out = PathBuf::from(s.require::<String>("out", args.out)?);
    let ck = ModelCheckpoint::load(&ckpt_path)?;
    let student = ck.student.as_ref().ok_or_else(|| {
        CoreError::Pipeline(format!(
            "stage 2 checkpoint required, {} holds stage {} without a student",
            ckpt_path.display(),
            ck.stage
        ))
    })?;
    let rgb = load_rgb(&input)?;
    let cube = reconstruct(student, &ck.teacher, &rgb)?.clamped();
    save_cube(&cube, &out)?;

    let mut manifest = Manifest::new("reconstruct");
    manifest.input(&ckpt_path);
    manifest.input(&input);
    manifest.output(&out);
    manifest.write(s.resolved(), &PathBuf::from(format!("{}.manifest.json", out.display())))?;
    println!(
        "wrote {}x{}x{} cube to {}",
        cube.height(),
        cube.width(),
        cube.bands(),
        out.display()
    );
    Ok(())
}
