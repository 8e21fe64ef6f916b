use std::path::PathBuf;

use clap::Args;
use hydra_core::data::{generate_cube, hsi_to_rgb, save_cube, save_rgb, SensitivityMatrix, SyntheticConfig, DEFAULT_LIBRARY_SEED};

use super::{create_dir, write_file};
use crate::dataset::{cube_name, rgb_name};
use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::settings::{parse_ranges, Settings};

/// Synthetic cubes, their RGB renderings and the camera sensitivity.
#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Cube height.
    #[arg(long)]
    h: Option<usize>,
    /// Cube width.
    #[arg(long)]
    w: Option<usize>,
    /// Spectral bands, at least 4.
    #[arg(long)]
    b: Option<usize>,
    /// Number of cubes.
    #[arg(long)]
    n: Option<usize>,
    /// Materials in the spectral library.
    #[arg(long)]
    materials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    library_seed: Option<u64>,
    /// Purity of the per-pixel material mixtures.
    #[arg(long)]
    sharpness: Option<f64>,
    /// Gaussian blobs per spatial field.
    #[arg(long)]
    blobs: Option<usize>,
    #[arg(long)]
    blob_radius_min: Option<f64>,
    #[arg(long)]
    blob_radius_max: Option<f64>,
    /// Standard deviation of additive noise.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Band range `a..b` receiving the noise; all bands when absent.
    #[arg(long)]
    noise_bands: Option<String>,
    /// Band ranges `a..b,c..d` removed from the stored cubes after rendering RGB.
    #[arg(long)]
    drop_bands: Option<String>,
}

/// Seed of the `index`-th cube of a dataset.
fn cube_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn run(args: GenDataArgs, mut s: Settings) -> Result<()> {
    let out = PathBuf::from(s.require::<String>("out", args.out)?);
    let h = s.get("h", args.h, 32)?;
    let w = s.get("w", args.w, 32)?;
    let b = s.get("b", args.b, 31)?;
    let n = s.get("n", args.n, 8)?;
    if b < 4 {
        return Err(CliError::Config(format!("band count must be at least 4, got {b}")));
    }
    if n == 0 {
        return Err(CliError::Config("cube count must be positive".into()));
    }
    let mut cfg = SyntheticConfig::new(h, w, b, 8);
    cfg.n_materials = s.get("materials", args.materials, cfg.n_materials)?;
    cfg.library_seed = s.get("library_seed", args.library_seed, DEFAULT_LIBRARY_SEED)?;
    cfg.sharpness = s.get("sharpness", args.sharpness, cfg.sharpness)?;
    cfg.blobs = s.get("blobs", args.blobs, cfg.blobs)?;
    let r0 = s.get("blob_radius_min", args.blob_radius_min, cfg.blob_radius.start)?;
    let r1 = s.get("blob_radius_max", args.blob_radius_max, cfg.blob_radius.end)?;
    cfg.blob_radius = r0..r1;
    cfg.noise_sigma = s.get("noise_sigma", args.noise_sigma, 0.0)?;
    if let Some(text) = s.text("noise_bands", args.noise_bands) {
        let mut ranges = parse_ranges(&text)?;
        if ranges.len() != 1 {
            return Err(CliError::Config(format!("noise-bands takes a single range, got {text:?}")));
        }
        cfg.noise_bands = ranges.pop();
    }
    let drop = match s.text("drop_bands", args.drop_bands) {
        Some(text) => parse_ranges(&text)?,
        None => Vec::new(),
    };
    let seed = s.get("seed", args.seed, 0u64)?;

    create_dir(&out)?;
    let mut manifest = Manifest::new("gen-data");
    let sensitivity = SensitivityMatrix::gaussian(b)?;
    let sens_path = out.join("sensitivity.csv");
    write_file(&sens_path, sensitivity.to_csv())?;
    manifest.output(&sens_path);
    for i in 0..n {
        let mut cube = generate_cube(cube_seed(seed, i), &cfg)?;
        let rgb = hsi_to_rgb(&cube, &sensitivity)?;
        if !drop.is_empty() {
            cube = cube.drop_bands(&drop)?;
        }
        let cube_path = out.join(cube_name(i));
        let rgb_path = out.join(rgb_name(i));
        save_cube(&cube, &cube_path)?;
        save_rgb(&rgb, &rgb_path)?;
        manifest.output(cube_path);
        manifest.output(rgb_path);
    }
    manifest.write(s.resolved(), &out.join("manifest.json"))?;
    println!("wrote {n} cubes of {h}x{w}x{b} to {}", out.display());
    Ok(())
}
