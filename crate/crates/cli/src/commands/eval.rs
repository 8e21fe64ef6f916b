use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use hydra_core::checkpoint::ModelCheckpoint;
use hydra_core::metrics::{
    aggregate, format_psnr, select_pixels, spectral_plot, student_flops, teacher_flops, FlopsEstimate, MetricReport,
    DEFAULT_EPS,
};
use hydra_core::training::{reconstruct, Stage};
use hydra_core::Error as CoreError;

use super::{create_dir, write_file};
use crate::dataset::{list_samples, load_pairs, select, Subset};
use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::settings::Settings;

pub const METRICS_HEADER: &str = "image,mrae,rmse,psnr,teacher_mrae,teacher_rmse,teacher_psnr";

/// Metrics, heatmaps and spectra of a stage-3 model on a dataset split.
#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    data: Option<String>,
    /// Stage-3 checkpoint.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// train, val or all.
    #[arg(long)]
    set: Option<Subset>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// MRAE denominator floor.
    #[arg(long)]
    eps: Option<f64>,
    /// Pixels per image in the spectra CSV.
    #[arg(long)]
    spectra_pixels: Option<usize>,
    #[arg(long)]
    spectra_seed: Option<u64>,
    /// MRAE mapped to full intensity; defaults to the largest value in the set.
    #[arg(long)]
    heatmap_max: Option<f64>,
    /// Also write per-layer operation counts.
    #[arg(long)]
    flops: bool,
}

fn report_fields(r: &MetricReport) -> String {
    format!("{},{},{}", r.mrae, r.rmse, format_psnr(r.psnr))
}

fn flops_csv(teacher: &FlopsEstimate, student: &FlopsEstimate) -> String {
    let mut out = String::from("model,layer,ops\n");
    for (model, est) in [("teacher_per_pixel", teacher), ("student", student)] {
        for (layer, ops) in &est.layers {
            writeln!(out, "{model},{layer},{ops}").unwrap();
        }
        writeln!(out, "{model},total,{}", est.total).unwrap();
    }
    out
}

pub fn load_stage3(path: &Path) -> Result<ModelCheckpoint> {
    if !path.is_file() {
        return Err(CoreError::Pipeline(format!("stage 3 checkpoint required, {} does not exist", path.display())).into());
    }
    let ck = ModelCheckpoint::load(path)?;
    if ck.stage != Stage::Refine || ck.student.is_none() {
        return Err(CoreError::Pipeline(format!(
            "stage 3 checkpoint required, {} holds stage {}",
            path.display(),
            ck.stage
        ))
        .into());
    }
    Ok(ck)
}

pub fn run(args: EvalArgs, mut s: Settings) -> Result<()> {
    let data = PathBuf::from(s.require::<String>("data", args.data)?);
    let ckpt_path = PathBuf::from(s.require::<String>("checkpoint", args.checkpoint)?);
    let out = PathBuf::from(s.require::<String>("out", args.out)?);
    let subset = s.get("set", args.set, Subset::Val)?;
    let val_fraction = s.get("val_fraction", args.val_fraction, 0.25)?;
    let split_seed = s.get("split_seed", args.split_seed, 0u64)?;
    let eps = s.get("eps", args.eps, DEFAULT_EPS)?;
    let n_pixels = s.get("spectra_pixels", args.spectra_pixels, 6usize)?;
    let spectra_seed = s.get("spectra_seed", args.spectra_seed, 0u64)?;
    let heatmap_max = s.opt("heatmap_max", args.heatmap_max)?;
    let flops = s.get("flops", args.flops.then_some(true), false)?;

    let ck = load_stage3(&ckpt_path)?;
    let student = ck.student.as_ref().expect("checked by load_stage3");
    let teacher = &ck.teacher;
    let samples = select(list_samples(&data)?, subset, val_fraction, split_seed)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("eval set {subset} of {} is empty", data.display())));
    }
    let pairs = load_pairs(&samples)?;
    let bands = teacher.config().bands;
    if let Some((sample, (_, cube))) = samples.iter().zip(&pairs).find(|(_, (_, c))| c.bands() != bands) {
        return Err(CliError::Config(format!(
            "{} has {} bands but the checkpoint expects {bands}",
            sample.cube_path.display(),
            cube.bands()
        )));
    }

    let mut manifest = Manifest::new("eval");
    manifest.input(&ckpt_path);
    let mut sr = Vec::with_capacity(pairs.len());
    let mut upper = Vec::with_capacity(pairs.len());
    for (sample, (rgb, cube)) in samples.iter().zip(&pairs) {
        manifest.input(&sample.cube_path);
        manifest.input(&sample.rgb_path);
        let pred = reconstruct(student, teacher, rgb)?.clamped();
        let rt = teacher.round_trip(cube)?.clamped();
        sr.push((MetricReport::compute(cube, &pred, eps)?, pred));
        upper.push(MetricReport::compute(cube, &rt, eps)?);
    }

    create_dir(&out)?;
    let mut table = format!("{METRICS_HEADER}\n");
    for (sample, ((r, _), t)) in samples.iter().zip(sr.iter().zip(&upper)) {
        writeln!(table, "{},{},{}", sample.name, report_fields(r), report_fields(t)).unwrap();
    }
    let reports: Vec<MetricReport> = sr.iter().map(|(r, _)| r.clone()).collect();
    let (m, r, p) = aggregate(&reports)?;
    let (tm, tr, tp) = aggregate(&upper)?;
    writeln!(table, "mean,{m},{r},{},{tm},{tr},{}", format_psnr(p), format_psnr(tp)).unwrap();
    let metrics_path = out.join("metrics.csv");
    write_file(&metrics_path, table)?;
    manifest.output(&metrics_path);

    let scale = match heatmap_max {
        Some(v) => v,
        None => reports.iter().map(|r| r.heatmap.max()).fold(0.0, f64::max),
    };
    let scale = if scale > 0.0 { scale } else { 1.0 };
    s.record("heatmap_max", scale);
    for (sample, ((report, pred), (_, cube))) in samples.iter().zip(sr.iter().zip(&pairs)) {
        let pgm = out.join(format!("heatmap_{}.pgm", sample.name));
        let ppm = out.join(format!("heatmap_{}.ppm", sample.name));
        write_file(&pgm, report.heatmap.to_pgm(scale)?)?;
        write_file(&ppm, report.heatmap.to_ppm(scale)?)?;
        let pixels = select_pixels(cube.height(), cube.width(), n_pixels.min(cube.num_pixels()), spectra_seed)?;
        let spectra = out.join(format!("spectra_{}.csv", sample.name));
        spectral_plot(cube, pred, &pixels, &spectra)?;
        manifest.output(pgm);
        manifest.output(ppm);
        manifest.output(spectra);
    }
    if flops {
        let (_, first) = &pairs[0];
        let csv = flops_csv(
            &teacher_flops(teacher.config())?,
            &student_flops(student.config(), first.height(), first.width())?,
        );
        let path = out.join("flops.csv");
        write_file(&path, csv)?;
        manifest.output(path);
    }
    manifest.write(s.resolved(), &out.join("manifest.json"))?;
    println!(
        "{} images: MRAE {m:.5} RMSE {r:.5} PSNR {} dB; teacher round trip PSNR {} dB",
        samples.len(),
        format_psnr(p),
        format_psnr(tp)
    );
    Ok(())
}
