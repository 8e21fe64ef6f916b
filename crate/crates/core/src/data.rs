//! Hyperspectral cubes, RGB projection, synthetic scene generation and the
//! `HSIC` cube file format.
//!
//! `HSIC` layout (all little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `HSIC` |
//! | 4     | format version (`u32`, currently 1) |
//! | 12    | `H`, `W`, `B` as `u32` |
//! | 4·H·W·B | values as `f32`, row-major with the band index fastest |

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{ensure, Error, Result};

pub const CUBE_MAGIC: [u8; 4] = *b"HSIC";
pub const CUBE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Seed of the shared material library used by [`generate_synthetic_cube`].
/// All cubes drawn with the default configuration share their materials, so a
/// model trained on some cubes can be evaluated on others.
pub const DEFAULT_LIBRARY_SEED: u64 = 0x4859_4452_415f_4c49;

/// `H × W × B` hyperspectral cube, band index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0 && bands > 0,
            Dimension,
            "cube dimensions must be positive, got {height}x{width}x{bands}"
        );
        ensure!(
            data.len() == height * width * bands,
            Dimension,
            "cube {height}x{width}x{bands} needs {} values, got {}",
            height * width * bands,
            data.len()
        );
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.width + j) * self.bands;
        &self.data[start..start + self.bands]
    }

    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let start = (i * self.width + j) * self.bands;
        &mut self.data[start..start + self.bands]
    }

    pub fn check_unit_range(&self) -> Result<()> {
        match self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            None => Ok(()),
            Some(i) => Err(Error::Contract(format!(
                "cube value {} at flat index {i} lies outside [0, 1]",
                self.data[i]
            ))),
        }
    }

    /// Copy with every value clamped into `[0, 1]`.
    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Removes the given band ranges, e.g. to discard noisy sensor regions.
    pub fn drop_bands(&self, ranges: &[Range<usize>]) -> Result<Self> {
        let keep: Vec<usize> = (0..self.bands)
            .filter(|b| !ranges.iter().any(|r| r.contains(b)))
            .collect();
        ensure!(!keep.is_empty(), Config, "band drop would remove every band");
        let data = self
            .data
            .chunks(self.bands)
            .flat_map(|px| keep.iter().map(move |&b| px[b]))
            .collect();
        Self::new(self.height, self.width, keep.len(), data)
    }
}

/// `H × W × 3` RGB image, channel index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0,
            Dimension,
            "image dimensions must be positive, got {height}x{width}"
        );
        ensure!(
            data.len() == height * width * 3,
            Dimension,
            "RGB image {height}x{width} needs {} values, got {}",
            height * width * 3,
            data.len()
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let s = (i * self.width + j) * 3;
        [self.data[s], self.data[s + 1], self.data[s + 2]]
    }

    /// Channel-first copy `[3, H, W]`, the layout the student consumes.
    pub fn to_channel_first(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c];
            }
        }
        out
    }
}

/// `H × W × L` map of per-pixel latent codes, latent index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    height: usize,
    width: usize,
    latent: usize,
    data: Vec<f64>,
}

impl LatentMap {
    pub fn new(height: usize, width: usize, latent: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == height * width * latent && height * width * latent > 0,
            Dimension,
            "latent map {height}x{width}x{latent} needs {} values, got {}",
            height * width * latent,
            data.len()
        );
        Ok(Self {
            height,
            width,
            latent,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let s = (i * self.width + j) * self.latent;
        &self.data[s..s + self.latent]
    }

    /// Channel-first copy `[L, H, W]`.
    pub fn to_channel_first(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.latent * hw];
        for p in 0..hw {
            for c in 0..self.latent {
                out[c * hw + p] = self.data[p * self.latent + c];
            }
        }
        out
    }

    pub fn from_channel_first(height: usize, width: usize, latent: usize, cf: &[f64]) -> Result<Self> {
        let hw = height * width;
        ensure!(
            cf.len() == latent * hw,
            Dimension,
            "channel-first latent has {} values, expected {}",
            cf.len(),
            latent * hw
        );
        let mut data = vec![0.0; cf.len()];
        for c in 0..latent {
            for p in 0..hw {
                data[p * latent + c] = cf[c * hw + p];
            }
        }
        Self::new(height, width, latent, data)
    }
}

/// `3 × B` camera response: one unimodal, row-normalized curve per RGB channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMatrix {
    bands: usize,
    rows: Vec<f64>,
}

impl SensitivityMatrix {
    /// Gaussian responses centred at 15 %, 50 % and 85 % of the band index
    /// range with σ = B/8, each row normalized to sum to one.
    pub fn gaussian(bands: usize) -> Result<Self> {
        ensure!(bands >= 1, Dimension, "sensitivity needs at least one band");
        let sigma = bands as f64 / 8.0;
        let span = (bands - 1) as f64;
        let mut rows = Vec::with_capacity(3 * bands);
        // Channel order R, G, B: red responds to the long-wavelength end.
        for frac in [0.85, 0.5, 0.15] {
            let centre = frac * span;
            let row: Vec<f64> = (0..bands)
                .map(|b| (-0.5 * ((b as f64 - centre) / sigma).powi(2)).exp())
                .collect();
            let total: f64 = row.iter().sum();
            rows.extend(row.iter().map(|v| v / total));
        }
        Ok(Self { bands, rows })
    }

    pub fn from_rows(bands: usize, rows: Vec<f64>) -> Result<Self> {
        ensure!(
            rows.len() == 3 * bands,
            Dimension,
            "sensitivity needs 3x{bands} values, got {}",
            rows.len()
        );
        ensure!(
            rows.iter().all(|v| *v >= 0.0 && v.is_finite()),
            Contract,
            "sensitivity values must be nonnegative"
        );
        Ok(Self { bands, rows })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn row(&self, channel: usize) -> &[f64] {
        &self.rows[channel * self.bands..(channel + 1) * self.bands]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for c in 0..3 {
            let line: Vec<String> = self.row(c).iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Malformed(format!("sensitivity value {v:?}: {e}")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        ensure!(rows.len() == 3, Malformed, "sensitivity CSV needs 3 rows, got {}", rows.len());
        let bands = rows[0].len();
        ensure!(
            rows.iter().all(|r| r.len() == bands),
            Malformed,
            "sensitivity rows have differing lengths"
        );
        Self::from_rows(bands, rows.concat())
    }
}

/// Projects every pixel spectrum through the sensitivity matrix.
pub fn hsi_to_rgb(cube: &HsiCube, sensitivity: &SensitivityMatrix) -> Result<RgbImage> {
    ensure!(
        sensitivity.bands() == cube.bands(),
        Dimension,
        "sensitivity has {} bands but cube has {}",
        sensitivity.bands(),
        cube.bands()
    );
    let data = cube
        .data()
        .chunks(cube.bands())
        .flat_map(|px| {
            (0..3).map(move |c| {
                sensitivity
                    .row(c)
                    .iter()
                    .zip(px)
                    .map(|(s, v)| s * v)
                    .sum::<f64>()
            })
        })
        .collect();
    RgbImage::new(cube.height(), cube.width(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub n_materials: usize,
    pub library_seed: u64,
    /// Scales the spatial fields before the softmax that yields mixing
    /// weights; larger values give purer pixels and sharper boundaries.
    pub sharpness: f64,
    /// Gaussian blobs per spatial field.
    pub blobs: usize,
    /// Blob radius range as a fraction of the image side; smaller radii give
    /// more, smaller regions per scene.
    pub blob_radius: Range<f64>,
    /// Standard deviation of additive Gaussian noise, 0 disables it.
    pub noise_sigma: f64,
    /// Bands the noise is applied to; `None` means all bands.
    pub noise_bands: Option<Range<usize>>,
}

impl SyntheticConfig {
    pub fn new(height: usize, width: usize, bands: usize, n_materials: usize) -> Self {
        Self {
            height,
            width,
            bands,
            n_materials,
            library_seed: DEFAULT_LIBRARY_SEED,
            sharpness: 4.0,
            blobs: 3,
            blob_radius: 0.15..0.5,
            noise_sigma: 0.0,
            noise_bands: None,
        }
    }
}

/// Deterministic synthetic cube using the default material library.
pub fn generate_synthetic_cube(
    seed: u64,
    height: usize,
    width: usize,
    bands: usize,
    n_materials: usize,
) -> Result<HsiCube> {
    generate_cube(seed, &SyntheticConfig::new(height, width, bands, n_materials))
}

/// Each material is a clamped sum of a linear ramp and 2–4 Gaussian bumps over
/// the band index. Every pixel mixes the materials with convex weights taken
/// from smooth random spatial fields. Values are rounded to `f32` precision so
/// that they survive the `HSIC` format unchanged.
pub fn generate_cube(seed: u64, cfg: &SyntheticConfig) -> Result<HsiCube> {
    ensure!(cfg.n_materials >= 1, Config, "n_materials must be at least 1");
    ensure!(
        cfg.height > 0 && cfg.width > 0 && cfg.bands > 0,
        Config,
        "cube dimensions must be positive"
    );
    ensure!(
        cfg.blobs >= 1 && cfg.blob_radius.start > 0.0 && cfg.blob_radius.start < cfg.blob_radius.end,
        Config,
        "spatial fields need at least one blob and a nonempty positive radius range"
    );
    ensure!(
        cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite(),
        Config,
        "noise sigma must be finite and nonnegative"
    );
    let materials = material_library(cfg.library_seed, cfg.bands, cfg.n_materials);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields: Vec<SpatialField> = (0..cfg.n_materials)
        .map(|_| SpatialField::random(&mut rng, cfg.blobs, cfg.blob_radius.clone()))
        .collect();

    let (h, w, b) = (cfg.height, cfg.width, cfg.bands);
    let mut data = vec![0.0; h * w * b];
    let mut logits = vec![0.0; cfg.n_materials];
    for i in 0..h {
        for j in 0..w {
            let y = (i as f64 + 0.5) / h as f64;
            let x = (j as f64 + 0.5) / w as f64;
            for (l, f) in logits.iter_mut().zip(&fields) {
                *l = cfg.sharpness * f.eval(x, y);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let px = &mut data[(i * w + j) * b..(i * w + j + 1) * b];
            for (wt, mat) in weights.iter().zip(&materials) {
                for (v, m) in px.iter_mut().zip(mat) {
                    *v += wt / total * m;
                }
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
        let range = cfg.noise_bands.clone().unwrap_or(0..b);
        for px in data.chunks_mut(b) {
            for band in range.clone().filter(|&k| k < b) {
                px[band] += normal.sample(&mut rng);
            }
        }
    }

    for v in &mut data {
        *v = v.clamp(0.0, 1.0) as f32 as f64;
    }
    HsiCube::new(h, w, b, data)
}

/// `count` spectra mixing the first `n_materials` library materials with
/// symmetric Dirichlet weights, as row-major `[count, bands]`. Concentrations
/// below one favour mixtures dominated by a few materials.
/// Unlike [`generate_cube`] the abundances carry no spatial structure, so the
/// set spans `n_materials - 1` dimensions.
pub fn generate_mixture_spectra(
    seed: u64,
    count: usize,
    bands: usize,
    n_materials: usize,
    concentration: f64,
    library_seed: u64,
) -> Result<Vec<f64>> {
    ensure!(count > 0 && bands > 0, Config, "mixture set needs positive count and band count");
    ensure!(n_materials >= 1, Config, "n_materials must be at least 1");
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::Config(format!("mixture concentration {concentration}: {e}")))?;
    let materials = material_library(library_seed, bands, n_materials);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; count * bands];
    for px in out.chunks_mut(bands) {
        let weights: Vec<f64> = (0..n_materials).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        for (wt, mat) in weights.iter().zip(&materials) {
            for (v, m) in px.iter_mut().zip(mat) {
                *v += wt / total * m;
            }
        }
        for v in px.iter_mut() {
            *v = v.clamp(0.0, 1.0) as f32 as f64;
        }
    }
    Ok(out)
}

fn material_library(seed: u64, bands: usize, n: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = (bands.max(2) - 1) as f64;
    (0..n)
        .map(|_| {
            let base = rng.random_range(0.05..0.35);
            let slope = rng.random_range(-0.2..0.3);
            let bumps: Vec<(f64, f64, f64)> = (0..rng.random_range(2..=4))
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0) * span,
                        rng.random_range(0.05..0.25) * bands as f64,
                        rng.random_range(0.1..0.5),
                    )
                })
                .collect();
            (0..bands)
                .map(|k| {
                    let t = k as f64 / span;
                    let bump: f64 = bumps
                        .iter()
                        .map(|&(c, s, a)| a * (-0.5 * ((k as f64 - c) / s).powi(2)).exp())
                        .sum();
                    (base + slope * t + bump).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect()
}

/// Sum of a few isotropic Gaussian blobs on the unit square.
struct SpatialField {
    blobs: Vec<(f64, f64, f64, f64)>,
}

impl SpatialField {
    fn random(rng: &mut ChaCha8Rng, count: usize, radius: Range<f64>) -> Self {
        let blobs = (0..count)
            .map(|_| {
                (
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(radius.clone()),
                    rng.random_range(0.5..1.5),
                )
            })
            .collect();
        Self { blobs }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        self.blobs
            .iter()
            .map(|&(cx, cy, r, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
            .sum()
    }
}

/// Serializes a cube to `HSIC` bytes. Values are stored as `f32`.
pub fn cube_to_bytes(cube: &HsiCube) -> Result<Vec<u8>> {
    let dims = [cube.height(), cube.width(), cube.bands()];
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * cube.data().len());
    out.extend_from_slice(&CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::DimensionOverflow(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in cube.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn cube_from_bytes(bytes: &[u8]) -> Result<HsiCube> {
    ensure!(
        bytes.len() >= 4,
        Truncated,
        "file holds {} bytes, header needs {HEADER_LEN}",
        bytes.len()
    );
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != CUBE_MAGIC {
        return Err(Error::BadMagic {
            expected: CUBE_MAGIC,
            found,
        });
    }
    ensure!(
        bytes.len() >= HEADER_LEN,
        Truncated,
        "file holds {} bytes, header needs {HEADER_LEN}",
        bytes.len()
    );
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != CUBE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (h, w, b) = (word(1) as usize, word(2) as usize, word(3) as usize);
    ensure!(
        h > 0 && w > 0 && b > 0,
        Malformed,
        "cube header has a zero dimension: {h}x{w}x{b}"
    );
    let payload = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(b))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::DimensionOverflow(format!("{h}x{w}x{b} cube overflows")))?;
    let body = &bytes[HEADER_LEN..];
    ensure!(
        body.len() >= payload,
        Truncated,
        "header declares {h}x{w}x{b} ({payload} bytes) but only {} follow",
        body.len()
    );
    ensure!(
        body.len() == payload,
        Malformed,
        "{} trailing bytes after cube payload",
        body.len() - payload
    );
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    HsiCube::new(h, w, b, data)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cube_to_bytes(cube)?).map_err(|e| Error::io(path, e))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    cube_from_bytes(&bytes)
}

/// RGB images use the `HSIC` container with three bands.
pub fn save_rgb(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let cube = HsiCube::new(image.height(), image.width(), 3, image.data().to_vec())?;
    save_cube(&cube, path)
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let cube = load_cube(path)?;
    ensure!(
        cube.bands() == 3,
        Dimension,
        "RGB file must have 3 channels, found {}",
        cube.bands()
    );
    RgbImage::new(cube.height(), cube.width(), cube.into_data())
}

/// Deterministic shuffled partition of `0..n` into train and validation index
/// sets. `fractions` are the (train, validation) shares and must sum to one.
pub fn split_indices(n: usize, fractions: (f64, f64), seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let (ft, fv) = fractions;
    ensure!(
        ft >= 0.0 && fv >= 0.0 && ((ft + fv) - 1.0).abs() < 1e-9,
        Config,
        "split fractions must be nonnegative and sum to 1, got ({ft}, {fv})"
    );
    let n_train = (n as f64 * ft).round() as usize;
    ensure!(
        n_train > 0 && n_train < n,
        Config,
        "split of {n} items with fractions ({ft}, {fv}) leaves an empty side"
    );
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx.split_off(n_train);
    Ok((idx, val))
}

pub fn split_dataset<T: Clone>(items: &[T], fractions: (f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (train, val) = split_indices(items.len(), fractions, seed)?;
    Ok((
        train.iter().map(|&i| items[i].clone()).collect(),
        val.iter().map(|&i| items[i].clone()).collect(),
    ))
}
