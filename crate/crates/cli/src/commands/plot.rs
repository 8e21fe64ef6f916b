use std::path::PathBuf;

use clap::Args;
use hydra_core::data::load_cube;
use hydra_core::metrics::{error_heatmap, select_pixels, spectral_plot, DEFAULT_EPS};

use super::{create_dir, write_file};
use crate::error::Result;
use crate::manifest::Manifest;
use crate::settings::Settings;

/// Heatmap and spectra comparing a predicted cube with ground truth.
#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    gt: Option<String>,
    #[arg(long)]
    pred: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    spectra_pixels: Option<usize>,
    #[arg(long)]
    spectra_seed: Option<u64>,
    /// MRAE mapped to full intensity; defaults to the image maximum.
    #[arg(long)]
    heatmap_max: Option<f64>,
}

pub fn run(args: PlotArgs, mut s: Settings) -> Result<()> {
    let gt_path = PathBuf::from(s.require::<String>("gt", args.gt)?);
    let pred_path = PathBuf::from(s.require::<String>("pred", args.pred)?);
    let out = PathBuf::from(s.require::<String>("out", args.out)?);
    let eps = s.get("eps", args.eps, DEFAULT_EPS)?;
    let n_pixels = s.get("spectra_pixels", args.spectra_pixels, 6usize)?;
    let seed = s.get("spectra_seed", args.spectra_seed, 0u64)?;
    let gt = load_cube(&gt_path)?;
    let pred = load_cube(&pred_path)?;
    let heatmap = error_heatmap(&gt, &pred, eps)?;
    let scale = match s.opt("heatmap_max", args.heatmap_max)? {
        Some(v) => v,
        None if heatmap.max() > 0.0 => heatmap.max(),
        None => 1.0,
    };
    s.record("heatmap_max", scale);

    create_dir(&out)?;
    let mut manifest = Manifest::new("plot");
    manifest.input(&gt_path);
    manifest.input(&pred_path);
    let pgm = out.join("heatmap.pgm");
    let ppm = out.join("heatmap.ppm");
    write_file(&pgm, heatmap.to_pgm(scale)?)?;
    write_file(&ppm, heatmap.to_ppm(scale)?)?;
    let pixels = select_pixels(gt.height(), gt.width(), n_pixels.min(gt.num_pixels()), seed)?;
    let spectra = out.join("spectra.csv");
    spectral_plot(&gt, &pred, &pixels, &spectra)?;
    manifest.output(pgm);
    manifest.output(ppm);
    manifest.output(spectra);
    manifest.write(s.resolved(), &out.join("manifest.json"))?;
    println!("MRAE {} over {}x{} pixels", heatmap.mean(), gt.height(), gt.width());
    Ok(())
}
