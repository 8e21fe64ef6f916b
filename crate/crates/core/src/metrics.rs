//! Reconstruction metrics, MRAE heatmaps, spectral plot tables and analytic
//! operation counts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::HsiCube;
use crate::error::{ensure, Error, Result};
use crate::student::{StudentConfig, LEVELS};
use crate::teacher::TeacherConfig;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_PEAK: f64 = 1.0;

/// Pairwise summation in a fixed order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len().next_power_of_two() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

fn check_pair(gt: &[f64], pred: &[f64]) -> Result<()> {
    ensure!(
        gt.len() == pred.len(),
        Dimension,
        "ground truth has {} values, prediction has {}",
        gt.len(),
        pred.len()
    );
    ensure!(!gt.is_empty(), Dimension, "metrics need at least one value");
    Ok(())
}

fn check_cubes(gt: &HsiCube, pred: &HsiCube) -> Result<()> {
    let (a, b) = (
        (gt.height(), gt.width(), gt.bands()),
        (pred.height(), pred.width(), pred.bands()),
    );
    ensure!(a == b, Dimension, "ground truth is {a:?} but prediction is {b:?}");
    Ok(())
}

fn relative_error(gt: f64, pred: f64, eps: f64) -> f64 {
    (gt - pred).abs() / gt.max(eps)
}

/// Mean of `|gt − pred| / max(gt, eps)` over a flat slice.
pub fn mrae_values(gt: &[f64], pred: &[f64], eps: f64) -> Result<f64> {
    check_pair(gt, pred)?;
    ensure!(eps > 0.0, Config, "MRAE eps must be positive, got {eps}");
    let terms: Vec<f64> = gt.iter().zip(pred).map(|(&g, &p)| relative_error(g, p, eps)).collect();
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

pub fn rmse_values(gt: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(gt, pred)?;
    let sq: Vec<f64> = gt.iter().zip(pred).map(|(&g, &p)| (g - p) * (g - p)).collect();
    Ok((pairwise_sum(&sq) / sq.len() as f64).sqrt())
}

/// `20·log10(peak / rmse)`; `f64::INFINITY` for an exact match.
pub fn psnr_from_rmse(rmse: f64, peak: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (peak / rmse).log10()
    }
}

pub fn psnr_values(gt: &[f64], pred: &[f64], peak: f64) -> Result<f64> {
    Ok(psnr_from_rmse(rmse_values(gt, pred)?, peak))
}

/// Mean over pixels of the per-pixel MRAE, so that it equals
/// [`ErrorHeatmap::mean`] exactly.
pub fn mrae(gt: &HsiCube, pred: &HsiCube, eps: f64) -> Result<f64> {
    Ok(error_heatmap(gt, pred, eps)?.mean())
}

pub fn rmse(gt: &HsiCube, pred: &HsiCube) -> Result<f64> {
    check_cubes(gt, pred)?;
    rmse_values(gt.data(), pred.data())
}

pub fn psnr(gt: &HsiCube, pred: &HsiCube, peak: f64) -> Result<f64> {
    check_cubes(gt, pred)?;
    psnr_values(gt.data(), pred.data(), peak)
}

/// Formats a PSNR value for CSV output, using `inf` for exact matches.
pub fn format_psnr(psnr: f64) -> String {
    if psnr.is_infinite() && psnr > 0.0 {
        "inf".to_owned()
    } else {
        format!("{psnr}")
    }
}

/// Per-pixel MRAE over bands, `H × W` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorHeatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

pub fn error_heatmap(gt: &HsiCube, pred: &HsiCube, eps: f64) -> Result<ErrorHeatmap> {
    check_cubes(gt, pred)?;
    ensure!(eps > 0.0, Config, "MRAE eps must be positive, got {eps}");
    let b = gt.bands();
    let values = gt
        .data()
        .par_chunks(b)
        .zip(pred.data().par_chunks(b))
        .map(|(g, p)| {
            let terms: Vec<f64> = g.iter().zip(p).map(|(&g, &p)| relative_error(g, p, eps)).collect();
            pairwise_sum(&terms) / b as f64
        })
        .collect();
    Ok(ErrorHeatmap {
        height: gt.height(),
        width: gt.width(),
        values,
    })
}

impl ErrorHeatmap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn mean(&self) -> f64 {
        pairwise_sum(&self.values) / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    fn levels(&self, scale_max: f64) -> Result<Vec<u8>> {
        ensure!(
            scale_max > 0.0 && scale_max.is_finite(),
            Config,
            "heatmap scale maximum must be positive, got {scale_max}"
        );
        Ok(self
            .values
            .iter()
            .map(|v| ((v / scale_max).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect())
    }

    /// Binary PGM (P5), linearly scaled so that `scale_max` maps to 255.
    pub fn to_pgm(&self, scale_max: f64) -> Result<Vec<u8>> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.levels(scale_max)?);
        Ok(out)
    }

    /// Binary PPM (P6) with a blue→green→red ramp.
    pub fn to_ppm(&self, scale_max: f64) -> Result<Vec<u8>> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for level in self.levels(scale_max)? {
            out.extend(false_color(level));
        }
        Ok(out)
    }
}

fn false_color(level: u8) -> [u8; 3] {
    let t = level as f64 / 255.0;
    let ramp = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ramp(2.0 * t - 1.0), ramp(1.0 - (2.0 * t - 1.0).abs()), ramp(1.0 - 2.0 * t)]
}

/// Parsed binary PGM or PPM image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Reads the P5/P6 images written by [`ErrorHeatmap::to_pgm`] and
/// [`ErrorHeatmap::to_ppm`].
pub fn read_pnm(bytes: &[u8]) -> Result<Pnm> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(pos > start, Truncated, "image header ends early");
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Malformed("non-ASCII image header".into()))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => {
            let mut found = [0u8; 4];
            found[..other.len().min(4)].copy_from_slice(&other.as_bytes()[..other.len().min(4)]);
            return Err(Error::BadMagic {
                expected: *b"P5\0\0",
                found,
            });
        }
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Malformed(format!("bad image header field {s:?}")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    ensure!(maxval == 255, Malformed, "only 8-bit images are supported, maxval {maxval}");
    let need = width * height * channels;
    ensure!(
        bytes.len() >= pos + need,
        Truncated,
        "image needs {need} pixel bytes, {} present",
        bytes.len().saturating_sub(pos)
    );
    Ok(Pnm {
        width,
        height,
        channels,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

/// Aggregate and per-pixel metrics for one reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mrae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub heatmap: ErrorHeatmap,
}

impl MetricReport {
    pub fn compute(gt: &HsiCube, pred: &HsiCube, eps: f64) -> Result<Self> {
        let heatmap = error_heatmap(gt, pred, eps)?;
        let rmse = rmse(gt, pred)?;
        Ok(Self {
            mrae: heatmap.mean(),
            rmse,
            psnr: psnr_from_rmse(rmse, DEFAULT_PEAK),
            heatmap,
        })
    }
}

/// Mean of each metric over several reports. PSNR is averaged in dB.
pub fn aggregate(reports: &[MetricReport]) -> Result<(f64, f64, f64)> {
    ensure!(!reports.is_empty(), EmptyOutput, "no reports to aggregate");
    let n = reports.len() as f64;
    let col = |f: fn(&MetricReport) -> f64| pairwise_sum(&reports.iter().map(f).collect::<Vec<_>>()) / n;
    Ok((col(|r| r.mrae), col(|r| r.rmse), col(|r| r.psnr)))
}

/// `count` distinct pixel coordinates drawn without replacement.
pub fn select_pixels(height: usize, width: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let total = height * width;
    ensure!(
        count <= total,
        Index,
        "cannot select {count} pixels from a {height}x{width} image"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, total, count)
        .into_iter()
        .map(|k| (k / width, k % width))
        .collect())
}

/// One row of a spectral plot table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrumRow {
    pub pixel: usize,
    pub i: usize,
    pub j: usize,
    pub band: usize,
    pub gt: f64,
    pub pred: f64,
}

pub const SPECTRUM_HEADER: &str = "pixel,i,j,band_index,gt,pred";

pub fn spectral_rows(gt: &HsiCube, pred: &HsiCube, pixels: &[(usize, usize)]) -> Result<Vec<SpectrumRow>> {
    check_cubes(gt, pred)?;
    let mut rows = Vec::with_capacity(pixels.len() * gt.bands());
    for (pixel, &(i, j)) in pixels.iter().enumerate() {
        ensure!(
            i < gt.height() && j < gt.width(),
            Index,
            "pixel ({i}, {j}) lies outside the {}x{} image",
            gt.height(),
            gt.width()
        );
        for (band, (&g, &p)) in gt.pixel(i, j).iter().zip(pred.pixel(i, j)).enumerate() {
            rows.push(SpectrumRow {
                pixel,
                i,
                j,
                band,
                gt: g,
                pred: p,
            });
        }
    }
    Ok(rows)
}

pub fn spectral_csv(rows: &[SpectrumRow]) -> String {
    let mut out = format!("{SPECTRUM_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.pixel, r.i, r.j, r.band, r.gt, r.pred).unwrap();
    }
    out
}

/// Writes the spectra of the selected pixels as CSV, one block of rows per pixel.
pub fn spectral_plot(gt: &HsiCube, pred: &HsiCube, pixels: &[(usize, usize)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv = spectral_csv(&spectral_rows(gt, pred, pixels)?);
    fs::write(path, csv).map_err(|e| Error::io(path, e))
}

pub fn parse_spectral_csv(text: &str) -> Result<Vec<SpectrumRow>> {
    let mut lines = text.lines();
    ensure!(
        lines.next() == Some(SPECTRUM_HEADER),
        Malformed,
        "spectral CSV must start with {SPECTRUM_HEADER:?}"
    );
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            ensure!(f.len() == 6, Malformed, "spectral CSV row {line:?} has {} fields", f.len());
            let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Malformed(format!("bad integer {s:?}")));
            let real = |s: &str| s.parse::<f64>().map_err(|_| Error::Malformed(format!("bad number {s:?}")));
            Ok(SpectrumRow {
                pixel: int(f[0])?,
                i: int(f[1])?,
                j: int(f[2])?,
                band: int(f[3])?,
                gt: real(f[4])?,
                pred: real(f[5])?,
            })
        })
        .collect()
}

/// Operation counts per named layer. Multiply and add count as two operations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopsEstimate {
    pub layers: Vec<(String, u64)>,
    pub total: u64,
}

impl FlopsEstimate {
    pub fn push(&mut self, name: impl Into<String>, ops: u64) {
        self.layers.push((name.into(), ops));
        self.total += ops;
    }

    fn absorb(&mut self, prefix: &str, other: FlopsEstimate) {
        for (name, ops) in other.layers {
            self.push(format!("{prefix}{name}"), ops);
        }
    }
}

/// `2·K·Cin·Cout·out` for a convolution with `K` kernel elements producing
/// `out` positions per output channel.
pub fn conv_flops(kernel_elems: usize, cin: usize, cout: usize, out_positions: usize) -> u64 {
    2 * (kernel_elems * cin * cout * out_positions) as u64
}

/// Per-pixel teacher encoder and decoder counts.
pub fn teacher_flops(cfg: &TeacherConfig) -> Result<FlopsEstimate> {
    cfg.validate()?;
    let mut est = FlopsEstimate::default();
    let widths = cfg.widths();
    let lengths = cfg.lengths();
    let levels = cfg.levels();
    let mut cin = 1;
    for l in 0..levels {
        let (c, len) = (widths[l], lengths[l]);
        est.push(format!("encoder.level{l}.conv"), conv_flops(cfg.kernel, cin, c, len));
        est.push(format!("encoder.level{l}.se"), se_flops(c, cfg.se_ratio));
        cin = c;
    }
    let top_channels = widths.last().copied().unwrap_or(1);
    let residual = lengths[levels];
    est.push("encoder.proj", conv_flops(1, top_channels * residual, cfg.latent, 1));
    est.push("decoder.proj", conv_flops(1, cfg.latent, top_channels * residual, 1));
    for l in (0..levels).rev() {
        let cout = if l == 0 { widths[0] } else { widths[l - 1] };
        let len = residual << (levels - 1 - l);
        est.push(format!("decoder.level{l}.conv"), conv_flops(cfg.kernel, widths[l], cout, len));
        est.push(format!("decoder.level{l}.se"), se_flops(cout, cfg.se_ratio));
    }
    let decoded = residual << levels;
    est.push("decoder.out_conv", conv_flops(1, widths.first().copied().unwrap_or(1), 1, decoded));
    est.push("decoder.out_proj", conv_flops(1, decoded, cfg.bands, 1));
    Ok(est)
}

fn se_flops(channels: usize, ratio: usize) -> u64 {
    let hidden = (channels / ratio).max(1);
    conv_flops(1, channels, hidden, 1) + conv_flops(1, hidden, channels, 1)
}

/// Student counts for one `height × width` image. Depthwise convs count one
/// input channel per output channel; attention counts both channel-by-channel
/// products.
pub fn student_flops(cfg: &StudentConfig, height: usize, width: usize) -> Result<FlopsEstimate> {
    cfg.validate()?;
    crate::student::check_input_size(height, width)?;
    let mut est = FlopsEstimate::default();
    let px = |l: usize| (height >> l) * (width >> l);
    let c0 = cfg.base_width;
    est.push("embed", conv_flops(1, 3, c0, px(0)));
    for l in 0..LEVELS {
        if l > 0 {
            let c = cfg.channels(l - 1);
            est.push(format!("down{}", l - 1), conv_flops(1, c, 2 * c, px(l)));
        }
        for b in 0..cfg.encoder_blocks[l] {
            est.absorb(&format!("encoder.level{l}.block{b}."), block_flops(cfg, l, px(l)));
        }
    }
    for l in (0..LEVELS - 1).rev() {
        let c = cfg.channels(l);
        est.push(format!("up{l}"), conv_flops(1, 2 * c, c, px(l)));
        for b in 0..cfg.decoder_blocks[l] {
            est.absorb(&format!("decoder.level{l}.block{b}."), block_flops(cfg, l, px(l)));
        }
    }
    est.push("refine", conv_flops(1, c0, c0, px(0)));
    est.push("out_proj", conv_flops(1, c0, cfg.latent, px(0)));
    Ok(est)
}

fn block_flops(cfg: &StudentConfig, level: usize, pixels: usize) -> FlopsEstimate {
    let c = cfg.channels(level);
    let heads = cfg.heads_at(level);
    let per_head = c / heads;
    let hidden = c * cfg.ffn_expansion;
    let mut est = FlopsEstimate::default();
    for name in ["query", "key", "value"] {
        est.push(format!("mdta.{name}.pw"), conv_flops(1, c, c, pixels));
        est.push(format!("mdta.{name}.dw"), conv_flops(9, 1, c, pixels));
    }
    est.push("mdta.scores", heads as u64 * 2 * (per_head * per_head * pixels) as u64);
    est.push("mdta.mix", heads as u64 * 2 * (per_head * per_head * pixels) as u64);
    est.push("mdta.proj", conv_flops(1, c, c, pixels));
    for name in ["gate1", "gate2"] {
        est.push(format!("dgfn.{name}.pw"), conv_flops(1, c, hidden, pixels));
        est.push(format!("dgfn.{name}.dw"), conv_flops(9, 1, hidden, pixels));
    }
    est.push("dgfn.fuse", conv_flops(1, hidden, c, pixels));
    est
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(h: usize, w: usize, b: usize, data: Vec<f64>) -> HsiCube {
        HsiCube::new(h, w, b, data).unwrap()
    }

    #[test]
    fn mrae_examples() {
        let gt = cube(1, 1, 2, vec![1.0, 2.0]);
        let pred = cube(1, 1, 2, vec![1.1, 1.8]);
        assert!((mrae(&gt, &pred, DEFAULT_EPS).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(mrae(&gt, &gt, DEFAULT_EPS).unwrap(), 0.0);
        let zero = cube(1, 1, 1, vec![0.0]);
        let near = cube(1, 1, 1, vec![0.001]);
        let v = mrae(&zero, &near, 1e-3).unwrap();
        assert!((v - 1.0).abs() < 1e-12 && v.is_finite());
    }

    #[test]
    fn rmse_and_psnr_examples() {
        let gt = cube(1, 1, 2, vec![0.0, 0.0]);
        let pred = cube(1, 1, 2, vec![0.3, 0.4]);
        assert!((rmse(&gt, &pred).unwrap() - 0.125f64.sqrt()).abs() < 1e-12);
        assert_eq!(psnr(&gt, &gt, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(format_psnr(f64::INFINITY), "inf");

        let gt = cube(4, 4, 4, vec![0.0; 64]);
        let pred = cube(4, 4, 4, vec![0.1; 64]);
        assert_eq!(rmse(&gt, &pred).unwrap(), 0.1);
        assert_eq!(psnr(&gt, &pred, 1.0).unwrap(), 20.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = cube(1, 2, 2, vec![0.0; 4]);
        let b = cube(2, 1, 2, vec![0.0; 4]);
        assert!(matches!(mrae(&a, &b, DEFAULT_EPS), Err(Error::Dimension(_))));
        assert!(matches!(rmse(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(error_heatmap(&a, &b, DEFAULT_EPS), Err(Error::Dimension(_))));
    }

    #[test]
    fn heatmap_locality_and_mean() {
        let gt = crate::data::generate_synthetic_cube(3, 6, 5, 8, 3).unwrap();
        assert!(error_heatmap(&gt, &gt, DEFAULT_EPS).unwrap().values().iter().all(|&v| v == 0.0));
        let mut pred = gt.clone();
        pred.pixel_mut(2, 3)[4] += 0.2;
        let map = error_heatmap(&gt, &pred, DEFAULT_EPS).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                assert_eq!(map.get(i, j) > 0.0, (i, j) == (2, 3));
            }
        }
        assert_eq!(map.mean(), mrae(&gt, &pred, DEFAULT_EPS).unwrap());
    }

    #[test]
    fn heatmap_mean_matches_naive_flat_mean() {
        let gt = crate::data::generate_synthetic_cube(5, 7, 9, 13, 4).unwrap();
        let pred = crate::data::generate_synthetic_cube(6, 7, 9, 13, 4).unwrap();
        let mut naive = 0.0;
        for (g, p) in gt.data().iter().zip(pred.data()) {
            naive += (g - p).abs() / g.max(DEFAULT_EPS);
        }
        naive /= gt.data().len() as f64;
        assert!((mrae(&gt, &pred, DEFAULT_EPS).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn pnm_export_parses_back() {
        let gt = cube(2, 3, 1, vec![1.0; 6]);
        let pred = cube(2, 3, 1, vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5]);
        let map = error_heatmap(&gt, &pred, DEFAULT_EPS).unwrap();
        let pgm = read_pnm(&map.to_pgm(0.5).unwrap()).unwrap();
        assert_eq!((pgm.width, pgm.height, pgm.channels), (3, 2, 1));
        assert_eq!(pgm.pixels, vec![0, 51, 102, 153, 204, 255]);
        let ppm = read_pnm(&map.to_ppm(0.5).unwrap()).unwrap();
        assert_eq!(ppm.pixels.len(), 18);
        assert_eq!(&ppm.pixels[..3], &[0, 0, 255]);
        assert_eq!(&ppm.pixels[15..], &[255, 0, 0]);
        assert!(map.to_pgm(0.0).is_err());
    }

    #[test]
    fn spectral_plot_round_trips() {
        let gt = crate::data::generate_synthetic_cube(1, 8, 8, 31, 3).unwrap();
        let pred = crate::data::generate_synthetic_cube(2, 8, 8, 31, 3).unwrap();
        let pixels = select_pixels(8, 8, 6, 11).unwrap();
        assert_eq!(pixels, select_pixels(8, 8, 6, 11).unwrap());
        let rows = spectral_rows(&gt, &pred, &pixels).unwrap();
        let parsed = parse_spectral_csv(&spectral_csv(&rows)).unwrap();
        assert_eq!(parsed, rows);
        let blocks: std::collections::BTreeSet<usize> = parsed.iter().map(|r| r.pixel).collect();
        assert_eq!(blocks.len(), 6);
        let same = spectral_rows(&gt, &gt, &pixels).unwrap();
        assert!(same.iter().all(|r| r.gt == r.pred));
        assert!(matches!(spectral_rows(&gt, &pred, &[(8, 0)]), Err(Error::Index(_))));
    }

    #[test]
    fn flops_examples() {
        assert_eq!(conv_flops(1, 1, 1, 1), 2);
        assert_eq!(conv_flops(3, 1, 16, 31), 2976);
        let cfg = StudentConfig::new(6);
        let small = student_flops(&cfg, 16, 16).unwrap();
        let large = student_flops(&cfg, 32, 32).unwrap();
        for ((name, a), (_, b)) in small.layers.iter().zip(&large.layers) {
            assert_eq!(*b, 4 * a, "{name}");
        }
        assert_eq!(small.total, small.layers.iter().map(|l| l.1).sum::<u64>());
        let t = teacher_flops(&TeacherConfig::new(31, 6).unwrap()).unwrap();
        assert_eq!(t.layers[0], ("encoder.level0.conv".to_owned(), 2976));
        assert_eq!(t.total, t.layers.iter().map(|l| l.1).sum::<u64>());
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(
            pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40),
            rot in 0usize..40,
        ) {
            let (gt, pred): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let k = rot % gt.len();
            let (mut g2, mut p2) = (gt.clone(), pred.clone());
            g2.rotate_left(k);
            p2.rotate_left(k);
            let a = mrae_values(&gt, &pred, DEFAULT_EPS).unwrap();
            let b = mrae_values(&g2, &p2, DEFAULT_EPS).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            prop_assert!(a.is_finite() && a >= 0.0);
            let r1 = rmse_values(&gt, &pred).unwrap();
            let r2 = rmse_values(&g2, &p2).unwrap();
            prop_assert!((r1 - r2).abs() <= 1e-12);
        }

        #[test]
        fn psnr_decreases_with_rmse(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(psnr_from_rmse(a, 1.0) > psnr_from_rmse(b, 1.0));
        }
    }
}
