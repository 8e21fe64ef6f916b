//! Pixel-wise spectral autoencoder with squeeze-excitation gating.
//!
//! Each encoder level is `conv1d → ReLU → SE gate → maxpool(2)` along the band
//! axis; after `N = floor(log2(B/L))` levels a linear projection maps the
//! flattened features to exactly `L` values. The decoder mirrors this with
//! nearest-neighbour upsampling and ends in a pointwise channel merge plus a
//! linear projection to exactly `B` bands. There are no skip connections, so
//! the decoder runs on latent codes alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{HsiCube, LatentMap};
use crate::error::{ensure, Error, Result};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const ENCODER_GROUP: &str = "teacher.encoder";
pub const DECODER_GROUP: &str = "teacher.decoder";

/// Rows processed per graph during inference.
const INFER_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherConfig {
    pub bands: usize,
    pub latent: usize,
    /// Channels of the first level; each further level doubles it.
    pub base_width: usize,
    pub se_ratio: usize,
    pub kernel: usize,
}

impl TeacherConfig {
    pub fn new(bands: usize, latent: usize) -> Result<Self> {
        let cfg = Self {
            bands,
            latent,
            base_width: 16,
            se_ratio: 4,
            kernel: 3,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.bands >= 4, Config, "band count must be at least 4, got {}", self.bands);
        ensure!(
            self.latent >= 1 && self.latent < self.bands,
            Config,
            "latent size must satisfy 1 <= L < B, got L={} B={}",
            self.latent,
            self.bands
        );
        ensure!(
            self.se_ratio >= 1 && self.base_width.is_multiple_of(self.se_ratio),
            Config,
            "SE ratio {} must divide the base width {}",
            self.se_ratio,
            self.base_width
        );
        ensure!(
            self.kernel % 2 == 1,
            Config,
            "kernel size must be odd, got {}",
            self.kernel
        );
        Ok(())
    }

    /// Number of stride-2 levels, `floor(log2(B / L))`.
    pub fn levels(&self) -> usize {
        let mut n = 0;
        while self.latent << (n + 1) <= self.bands {
            n += 1;
        }
        n
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.levels()).map(|l| self.base_width << l).collect()
    }

    /// Band-axis length entering each encoder level, plus the residual length
    /// after the last pool.
    pub fn lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.bands];
        for _ in 0..self.levels() {
            lens.push(lens.last().unwrap() / 2);
        }
        lens
    }

    fn top_channels(&self) -> usize {
        self.widths().last().copied().unwrap_or(1)
    }

    fn residual_len(&self) -> usize {
        *self.lengths().last().unwrap()
    }

    fn decoded_len(&self) -> usize {
        self.residual_len() << self.levels()
    }

    pub fn compression_ratio(&self) -> f64 {
        self.bands as f64 / self.latent as f64
    }
}

pub fn compression_ratio(bands: usize, latent: usize) -> Result<f64> {
    ensure!(
        latent >= 1 && latent < bands,
        Contract,
        "compression ratio needs 1 <= L < B, got L={latent} B={bands}"
    );
    Ok(bands as f64 / latent as f64)
}

/// Graph handles of one squeeze-excitation block.
#[derive(Clone, Copy, Debug)]
pub struct SeVars {
    pub w_reduce: Var,
    pub b_reduce: Var,
    pub w_expand: Var,
    pub b_expand: Var,
}

/// Channel attention weights `sigmoid(W_e · relu(W_r · mean(F) + b_r) + b_e)`
/// for `F` of shape `[C, len]` or `[n, C, len]`. The result drops the last
/// axis; callers gate `F` with [`Graph::mul_channel`].
pub fn se_excite(g: &mut Graph, f: Var, se: &SeVars) -> Result<Var> {
    let squeezed = g.mean_last(f)?;
    let hidden = g.linear(squeezed, se.w_reduce, se.b_reduce)?;
    let hidden = g.relu(hidden)?;
    let logits = g.linear(hidden, se.w_expand, se.b_expand)?;
    g.sigmoid(logits)
}

/// Value-level squeeze-excitation weights. `w_reduce` is `[C/r, C]` and
/// `w_expand` is `[C, C/r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeBlockParams {
    pub w_reduce: Tensor,
    pub b_reduce: Tensor,
    pub w_expand: Tensor,
    pub b_expand: Tensor,
}

impl SeBlockParams {
    pub fn zeros(channels: usize, ratio: usize) -> Result<Self> {
        ensure!(
            ratio >= 1 && channels.is_multiple_of(ratio),
            Config,
            "SE ratio {ratio} must divide {channels} channels"
        );
        let hidden = channels / ratio;
        Ok(Self {
            w_reduce: Tensor::zeros(&[hidden, channels]),
            b_reduce: Tensor::zeros(&[hidden]),
            w_expand: Tensor::zeros(&[channels, hidden]),
            b_expand: Tensor::zeros(&[channels]),
        })
    }

    /// Attention weights for `F: [C, len]`, returned as `[C, 1]`.
    pub fn excite(&self, f: &Tensor) -> Result<Tensor> {
        ensure!(
            f.shape().len() == 2,
            Dimension,
            "SE input must be [C, len], got {:?}",
            f.shape()
        );
        let channels = f.shape()[0];
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let se = SeVars {
            w_reduce: g.constant(self.w_reduce.clone()),
            b_reduce: g.constant(self.b_reduce.clone()),
            w_expand: g.constant(self.w_expand.clone()),
            b_expand: g.constant(self.b_expand.clone()),
        };
        let a = se_excite(&mut g, fv, &se)?;
        g.value(a).clone().reshape(&[channels, 1])
    }
}

#[derive(Clone, Copy, Debug)]
struct SeIds {
    w_reduce: ParamId,
    b_reduce: ParamId,
    w_expand: ParamId,
    b_expand: ParamId,
}

impl SeIds {
    fn vars(&self, b: &Bound) -> SeVars {
        SeVars {
            w_reduce: b[self.w_reduce],
            b_reduce: b[self.b_reduce],
            w_expand: b[self.w_expand],
            b_expand: b[self.b_expand],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LevelIds {
    conv_w: ParamId,
    conv_b: ParamId,
    se: SeIds,
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Teacher {
    config: TeacherConfig,
    params: ParamStore,
    encoder: Vec<LevelIds>,
    enc_proj: LinearIds,
    dec_proj: LinearIds,
    decoder: Vec<LevelIds>,
    out_conv: LinearIds,
    out_proj: LinearIds,
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let t = uniform_fan_in(&mut self.rng, shape, fan_in);
        self.params.add(name, t)
    }

    fn linear(&mut self, prefix: &str, fin: usize, fout: usize) -> LinearIds {
        LinearIds {
            w: self.add(format!("{prefix}.weight"), &[fout, fin], fin),
            b: self.add(format!("{prefix}.bias"), &[fout], fin),
        }
    }

    fn level(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, ratio: usize) -> LevelIds {
        let conv_w = self.add(format!("{prefix}.conv.weight"), &[cout, cin, k], cin * k);
        let conv_b = self.add(format!("{prefix}.conv.bias"), &[cout], cin * k);
        let hidden = cout / ratio;
        let reduce = self.linear(&format!("{prefix}.se.reduce"), cout, hidden);
        let expand = self.linear(&format!("{prefix}.se.expand"), hidden, cout);
        LevelIds {
            conv_w,
            conv_b,
            se: SeIds {
                w_reduce: reduce.w,
                b_reduce: reduce.b,
                w_expand: expand.w,
                b_expand: expand.b,
            },
        }
    }
}

impl Teacher {
    pub fn new(config: TeacherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let widths = config.widths();
        let (k, r) = (config.kernel, config.se_ratio);

        let mut encoder = Vec::new();
        let mut cin = 1;
        for (l, &w) in widths.iter().enumerate() {
            encoder.push(b.level(&format!("{ENCODER_GROUP}.level{l}"), cin, w, k, r));
            cin = w;
        }
        let flat = config.top_channels() * config.residual_len();
        let enc_proj = b.linear(&format!("{ENCODER_GROUP}.proj"), flat, config.latent);

        let dec_proj = b.linear(&format!("{DECODER_GROUP}.proj"), config.latent, flat);
        let mut decoder = Vec::new();
        for l in (0..widths.len()).rev() {
            let cout = if l > 0 { widths[l - 1] } else { widths[0] };
            decoder.push(b.level(&format!("{DECODER_GROUP}.level{l}"), widths[l], cout, k, r));
        }
        let merged = if widths.is_empty() { 1 } else { widths[0] };
        let out_conv = LinearIds {
            w: b.add(format!("{DECODER_GROUP}.out_conv.weight"), &[1, merged, 1], merged),
            b: b.add(format!("{DECODER_GROUP}.out_conv.bias"), &[1], merged),
        };
        let out_proj = b.linear(
            &format!("{DECODER_GROUP}.out_proj"),
            config.decoded_len(),
            config.bands,
        );
        Ok(Self {
            config,
            params,
            encoder,
            enc_proj,
            dec_proj,
            decoder,
            out_conv,
            out_proj,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Squeeze-excitation weights of encoder level `level`.
    pub fn encoder_se(&self, level: usize) -> SeBlockParams {
        let se = self.encoder[level].se;
        SeBlockParams {
            w_reduce: self.params.get(se.w_reduce).clone(),
            b_reduce: self.params.get(se.b_reduce).clone(),
            w_expand: self.params.get(se.w_expand).clone(),
            b_expand: self.params.get(se.b_expand).clone(),
        }
    }

    /// Encodes `x: [n, B]` into latent codes `[n, L]`.
    pub fn encode(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let (n, bands) = rows_of(g, x, "teacher input")?;
        ensure!(
            bands == self.config.bands,
            Dimension,
            "teacher expects {} bands, input has {bands}",
            self.config.bands
        );
        let mut h = g.reshape(x, &[n, 1, bands])?;
        for level in &self.encoder {
            let f = self.gated_conv(g, bound, h, level)?;
            h = g.maxpool1d(f, 2)?;
        }
        let flat = g.reshape(h, &[n, self.config.top_channels() * self.config.residual_len()])?;
        g.linear(flat, bound[self.enc_proj.w], bound[self.enc_proj.b])
    }

    /// Decodes latent codes `z: [n, L]` into spectra `[n, B]`.
    pub fn decode(&self, g: &mut Graph, bound: &Bound, z: Var) -> Result<Var> {
        let (n, latent) = rows_of(g, z, "teacher latent")?;
        ensure!(
            latent == self.config.latent,
            Dimension,
            "teacher expects latent size {}, got {latent}",
            self.config.latent
        );
        let h = g.linear(z, bound[self.dec_proj.w], bound[self.dec_proj.b])?;
        let mut h = g.reshape(
            h,
            &[n, self.config.top_channels(), self.config.residual_len()],
        )?;
        for level in &self.decoder {
            let f = self.gated_conv(g, bound, h, level)?;
            h = g.upsample1d_nearest(f, 2)?;
        }
        let merged = g.conv1d(h, bound[self.out_conv.w], bound[self.out_conv.b], 1, 0)?;
        let flat = g.reshape(merged, &[n, self.config.decoded_len()])?;
        g.linear(flat, bound[self.out_proj.w], bound[self.out_proj.b])
    }

    fn gated_conv(&self, g: &mut Graph, bound: &Bound, x: Var, level: &LevelIds) -> Result<Var> {
        let pad = self.config.kernel / 2;
        let f = g.conv1d(x, bound[level.conv_w], bound[level.conv_b], 1, pad)?;
        let f = g.relu(f)?;
        let a = se_excite(g, f, &level.se.vars(bound))?;
        g.mul_channel(f, a)
    }

    /// Inference over row-major `[n, width_in]` values in fixed-size chunks.
    fn infer_rows(
        &self,
        rows: &[f64],
        width_in: usize,
        f: impl Fn(&Self, &mut Graph, &Bound, Var) -> Result<Var>,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for chunk in rows.chunks(INFER_CHUNK * width_in) {
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, |_| false);
            let x = g.constant(Tensor::new(vec![chunk.len() / width_in, width_in], chunk.to_vec())?);
            let y = f(self, &mut g, &bound, x)?;
            out.extend_from_slice(g.value(y).data());
        }
        Ok(out)
    }

    pub fn encode_rows(&self, spectra: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            spectra.len().is_multiple_of(self.config.bands) && !spectra.is_empty(),
            Dimension,
            "{} values do not form rows of {} bands",
            spectra.len(),
            self.config.bands
        );
        self.infer_rows(spectra, self.config.bands, Self::encode)
    }

    pub fn decode_rows(&self, codes: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            codes.len().is_multiple_of(self.config.latent) && !codes.is_empty(),
            Dimension,
            "{} values do not form rows of latent size {}",
            codes.len(),
            self.config.latent
        );
        self.infer_rows(codes, self.config.latent, Self::decode)
    }

    pub fn encode_pixel(&self, spectrum: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            spectrum.len() == self.config.bands,
            Dimension,
            "teacher expects {} bands, got {}",
            self.config.bands,
            spectrum.len()
        );
        self.encode_rows(spectrum)
    }

    pub fn decode_pixel(&self, code: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            code.len() == self.config.latent,
            Dimension,
            "teacher expects latent size {}, got {}",
            self.config.latent,
            code.len()
        );
        self.decode_rows(code)
    }

    pub fn encode_cube(&self, cube: &HsiCube) -> Result<LatentMap> {
        ensure!(
            cube.bands() == self.config.bands,
            Dimension,
            "cube has {} bands but the teacher expects {}",
            cube.bands(),
            self.config.bands
        );
        let codes = self.encode_rows(cube.data())?;
        LatentMap::new(cube.height(), cube.width(), self.config.latent, codes)
    }

    pub fn decode_cube(&self, latent: &LatentMap) -> Result<HsiCube> {
        ensure!(
            latent.latent() == self.config.latent,
            Dimension,
            "latent map has {} channels but the teacher expects {}",
            latent.latent(),
            self.config.latent
        );
        let spectra = self.decode_rows(latent.data())?;
        HsiCube::new(latent.height(), latent.width(), self.config.bands, spectra)
    }

    /// Encode-then-decode of every pixel.
    pub fn round_trip(&self, cube: &HsiCube) -> Result<HsiCube> {
        self.decode_cube(&self.encode_cube(cube)?)
    }
}

fn rows_of(g: &Graph, x: Var, what: &str) -> Result<(usize, usize)> {
    match *g.shape(x) {
        [n, w] => Ok((n, w)),
        ref s => Err(Error::Dimension(format!("{what} must be [n, width], got {s:?}"))),
    }
}
