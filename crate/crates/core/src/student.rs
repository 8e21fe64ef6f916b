//! Four-level U-Net over RGB images that predicts a per-pixel latent map.
//!
//! Every transformer block is a dual-gated feed-forward unit wrapped around a
//! multi-Dconv-head transposed attention (MDTA) unit: attention is computed
//! between channels, so its cost is quadratic in channels per head and linear
//! in pixels.
//!
//! Level `l` carries `2^l·C` channels at `H/2^l × W/2^l`. Downsampling is a
//! stride-2 pointwise conv that doubles channels; upsampling is nearest ×2
//! followed by a pointwise conv that halves them. The first decoder block of
//! each level adds the matching encoder feature map (additive skip). After the
//! decoder, `S = X⁰ + Conv(X̃⁰)` is projected pointwise from `C` to `L`
//! channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LatentMap, RgbImage};
use crate::error::{ensure, Error, Result};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const STUDENT_GROUP: &str = "student";
pub const LEVELS: usize = 4;
const DW_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudentConfig {
    pub latent: usize,
    pub base_width: usize,
    /// Attention heads at level 0; doubles per level.
    pub heads: usize,
    pub encoder_blocks: [usize; LEVELS],
    /// Decoder blocks for levels 0, 1 and 2 (level 3 is the bottleneck).
    pub decoder_blocks: [usize; LEVELS - 1],
    /// Hidden width of the gated feed-forward branches relative to the input.
    pub ffn_expansion: usize,
}

impl StudentConfig {
    pub fn new(latent: usize) -> Self {
        Self {
            latent,
            base_width: 16,
            heads: 2,
            encoder_blocks: [1, 1, 2, 2],
            decoder_blocks: [1, 1, 2],
            ffn_expansion: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.latent >= 1, Config, "student latent size must be positive");
        ensure!(
            self.base_width >= 1 && self.heads >= 1 && self.base_width.is_multiple_of(self.heads),
            Config,
            "head count {} must divide base width {}",
            self.heads,
            self.base_width
        );
        ensure!(
            self.decoder_blocks.iter().all(|&b| b >= 1),
            Config,
            "every decoder level needs at least one block to receive its skip"
        );
        ensure!(self.ffn_expansion >= 1, Config, "ffn expansion must be at least 1");
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn heads_at(&self, level: usize) -> usize {
        self.heads << level
    }

    /// `[2^l·C, H/2^l, W/2^l]`, the feature shape at level `l`.
    pub fn level_shape(&self, level: usize, height: usize, width: usize) -> [usize; 3] {
        [self.channels(level), height >> level, width >> level]
    }
}

/// Checks the spatial divisibility required by the three downsampling steps.
pub fn check_input_size(height: usize, width: usize) -> Result<()> {
    let f = 1 << (LEVELS - 1);
    if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
        return Err(Error::InputShape(format!(
            "image height and width must be positive multiples of {f}, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Pointwise-then-depthwise convolution stack.
#[derive(Clone, Debug, PartialEq)]
pub struct DconvParams {
    pub pw_weight: Tensor,
    pub pw_bias: Tensor,
    pub dw_weight: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DconvVars {
    pub pw_weight: Var,
    pub pw_bias: Var,
    pub dw_weight: Var,
}

impl DconvParams {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            pw_weight: Tensor::zeros(&[cout, cin, 1, 1]),
            pw_bias: Tensor::zeros(&[cout]),
            dw_weight: Tensor::zeros(&[cout, 1, DW_KERNEL, DW_KERNEL]),
        }
    }

    fn random(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        Self {
            pw_weight: uniform_fan_in(rng, &[cout, cin, 1, 1], cin),
            pw_bias: uniform_fan_in(rng, &[cout], cin),
            dw_weight: uniform_fan_in(rng, &[cout, 1, DW_KERNEL, DW_KERNEL], DW_KERNEL * DW_KERNEL),
        }
    }

    pub fn to_vars(&self, g: &mut Graph, requires_grad: bool) -> DconvVars {
        DconvVars {
            pw_weight: g.leaf(self.pw_weight.clone(), requires_grad),
            pw_bias: g.leaf(self.pw_bias.clone(), requires_grad),
            dw_weight: g.leaf(self.dw_weight.clone(), requires_grad),
        }
    }
}

pub fn dconv(g: &mut Graph, x: Var, p: &DconvVars) -> Result<Var> {
    let h = g.conv2d_pointwise(x, p.pw_weight, p.pw_bias, 1)?;
    g.conv2d_depthwise(h, p.dw_weight)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdtaParams {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub query: DconvParams,
    pub key: DconvParams,
    pub value: DconvParams,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    /// Natural log of the attention temperature α.
    pub log_alpha: Tensor,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MdtaVars {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub query: DconvVars,
    pub key: DconvVars,
    pub value: DconvVars,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub log_alpha: Var,
    pub heads: usize,
}

impl MdtaParams {
    /// Identity-affine layer norm, zero convolutions and α = sqrt(C/h).
    pub fn zeros(channels: usize, heads: usize) -> Self {
        Self {
            ln_gamma: Tensor::full(&[channels], 1.0),
            ln_beta: Tensor::zeros(&[channels]),
            query: DconvParams::zeros(channels, channels),
            key: DconvParams::zeros(channels, channels),
            value: DconvParams::zeros(channels, channels),
            proj_weight: Tensor::zeros(&[channels, channels, 1, 1]),
            proj_bias: Tensor::zeros(&[channels]),
            log_alpha: Tensor::scalar(initial_log_alpha(channels, heads)),
            heads,
        }
    }

    pub fn random(seed: u64, channels: usize, heads: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(&mut rng, channels, heads)
    }

    fn random_with(rng: &mut ChaCha8Rng, channels: usize, heads: usize) -> Self {
        Self {
            ln_gamma: Tensor::full(&[channels], 1.0),
            ln_beta: Tensor::zeros(&[channels]),
            query: DconvParams::random(rng, channels, channels),
            key: DconvParams::random(rng, channels, channels),
            value: DconvParams::random(rng, channels, channels),
            proj_weight: uniform_fan_in(rng, &[channels, channels, 1, 1], channels),
            proj_bias: uniform_fan_in(rng, &[channels], channels),
            log_alpha: Tensor::scalar(initial_log_alpha(channels, heads)),
            heads,
        }
    }

    pub fn to_vars(&self, g: &mut Graph, requires_grad: bool) -> MdtaVars {
        MdtaVars {
            ln_gamma: g.leaf(self.ln_gamma.clone(), requires_grad),
            ln_beta: g.leaf(self.ln_beta.clone(), requires_grad),
            query: self.query.to_vars(g, requires_grad),
            key: self.key.to_vars(g, requires_grad),
            value: self.value.to_vars(g, requires_grad),
            proj_weight: g.leaf(self.proj_weight.clone(), requires_grad),
            proj_bias: g.leaf(self.proj_bias.clone(), requires_grad),
            log_alpha: g.leaf(self.log_alpha.clone(), requires_grad),
            heads: self.heads,
        }
    }
}

fn initial_log_alpha(channels: usize, heads: usize) -> f64 {
    (channels as f64 / heads as f64).sqrt().ln()
}

/// Result of [`mdta_with_attention`].
#[derive(Clone, Copy, Debug)]
pub struct MdtaOutput {
    pub output: Var,
    /// Post-softmax channel attention, `[heads, C/h, C/h]`.
    pub attention: Var,
}

pub fn mdta(g: &mut Graph, x: Var, p: &MdtaVars) -> Result<Var> {
    Ok(mdta_with_attention(g, x, p)?.output)
}

/// `MDTA(X) = H_p(A(X)) + X` with `A = Softmax(K·Qᵀ / (n·α)) · V` per head,
/// where Q, K, V come from `LN → pointwise → depthwise` and are viewed as
/// `[heads, C/h, n]` over the `n = H·W` pixels.
pub fn mdta_with_attention(g: &mut Graph, x: Var, p: &MdtaVars) -> Result<MdtaOutput> {
    let shape = g.shape(x).to_vec();
    ensure!(shape.len() == 3, Dimension, "MDTA input must be [C, H, W], got {shape:?}");
    let (c, n) = (shape[0], shape[1] * shape[2]);
    if p.heads == 0 || c % p.heads != 0 {
        return Err(Error::Config(format!(
            "{c} channels cannot be split across {} heads",
            p.heads
        )));
    }
    ensure!(
        g.shape(p.ln_gamma) == [c],
        Dimension,
        "MDTA parameters expect {} channels, input has {c}",
        g.shape(p.ln_gamma)[0]
    );
    let per_head = c / p.heads;
    let normed = g.layernorm(x, p.ln_gamma, p.ln_beta)?;
    let q = dconv(g, normed, &p.query)?;
    let k = dconv(g, normed, &p.key)?;
    let v = dconv(g, normed, &p.value)?;
    let q = g.reshape(q, &[p.heads, per_head, n])?;
    let k = g.reshape(k, &[p.heads, per_head, n])?;
    let v = g.reshape(v, &[p.heads, per_head, n])?;

    let scores = g.bmm_nt(k, q)?;
    // Averaging over pixels keeps logits independent of the image size.
    let scores = g.scale(scores, 1.0 / n as f64)?;
    let neg_log_alpha = g.scale(p.log_alpha, -1.0)?;
    let inv_alpha = g.exp(neg_log_alpha)?;
    let logits = g.scale_by(scores, inv_alpha)?;
    let attention = g.softmax(logits, 2)?;
    let mixed = g.bmm(attention, v)?;
    let mixed = g.reshape(mixed, &shape)?;
    let projected = g.conv2d_pointwise(mixed, p.proj_weight, p.proj_bias, 1)?;
    let output = g.add(projected, x)?;
    Ok(MdtaOutput { output, attention })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgfnParams {
    pub gate1: DconvParams,
    pub gate2: DconvParams,
    pub fuse_weight: Tensor,
    pub fuse_bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DgfnVars {
    pub gate1: DconvVars,
    pub gate2: DconvVars,
    pub fuse_weight: Var,
    pub fuse_bias: Var,
}

impl DgfnParams {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            gate1: DconvParams::zeros(channels, hidden),
            gate2: DconvParams::zeros(channels, hidden),
            fuse_weight: Tensor::zeros(&[channels, hidden, 1, 1]),
            fuse_bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn random(seed: u64, channels: usize, hidden: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(&mut rng, channels, hidden)
    }

    fn random_with(rng: &mut ChaCha8Rng, channels: usize, hidden: usize) -> Self {
        Self {
            gate1: DconvParams::random(rng, channels, hidden),
            gate2: DconvParams::random(rng, channels, hidden),
            fuse_weight: uniform_fan_in(rng, &[channels, hidden, 1, 1], hidden),
            fuse_bias: uniform_fan_in(rng, &[channels], hidden),
        }
    }

    pub fn to_vars(&self, g: &mut Graph, requires_grad: bool) -> DgfnVars {
        DgfnVars {
            gate1: self.gate1.to_vars(g, requires_grad),
            gate2: self.gate2.to_vars(g, requires_grad),
            fuse_weight: g.leaf(self.fuse_weight.clone(), requires_grad),
            fuse_bias: g.leaf(self.fuse_bias.clone(), requires_grad),
        }
    }
}

/// Transformer block: `Y(X) = H_p(M¹ ⊙ M²) + MDTA(X)` with gates
/// `Mᵍ = GELU(Dconvᵍ(MDTA(X)))`. Passing `skip` gives the decoder form, which
/// also adds the encoder feature map.
pub fn dgfn(
    g: &mut Graph,
    x: Var,
    attn: &MdtaVars,
    ffn: &DgfnVars,
    skip: Option<Var>,
) -> Result<Var> {
    if let Some(s) = skip {
        ensure!(
            g.shape(s) == g.shape(x),
            Dimension,
            "skip connection shape {:?} differs from decoder input {:?}",
            g.shape(s),
            g.shape(x)
        );
    }
    let m = mdta(g, x, attn)?;
    let g1 = dconv(g, m, &ffn.gate1)?;
    let g1 = g.gelu(g1)?;
    let g2 = dconv(g, m, &ffn.gate2)?;
    let g2 = g.gelu(g2)?;
    let gated = g.mul(g1, g2)?;
    let fused = g.conv2d_pointwise(gated, ffn.fuse_weight, ffn.fuse_bias, 1)?;
    let y = g.add(fused, m)?;
    match skip {
        Some(s) => g.add(y, s),
        None => Ok(y),
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct DconvIds {
    pw_w: ParamId,
    pw_b: ParamId,
    dw_w: ParamId,
}

impl DconvIds {
    fn vars(&self, b: &Bound) -> DconvVars {
        DconvVars {
            pw_weight: b[self.pw_w],
            pw_bias: b[self.pw_b],
            dw_weight: b[self.dw_w],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    ln_gamma: ParamId,
    ln_beta: ParamId,
    query: DconvIds,
    key: DconvIds,
    value: DconvIds,
    proj: ConvIds,
    log_alpha: ParamId,
    heads: usize,
    gate1: DconvIds,
    gate2: DconvIds,
    fuse: ConvIds,
}

impl BlockIds {
    fn vars(&self, b: &Bound) -> (MdtaVars, DgfnVars) {
        (
            MdtaVars {
                ln_gamma: b[self.ln_gamma],
                ln_beta: b[self.ln_beta],
                query: self.query.vars(b),
                key: self.key.vars(b),
                value: self.value.vars(b),
                proj_weight: b[self.proj.w],
                proj_bias: b[self.proj.b],
                log_alpha: b[self.log_alpha],
                heads: self.heads,
            },
            DgfnVars {
                gate1: self.gate1.vars(b),
                gate2: self.gate2.vars(b),
                fuse_weight: b[self.fuse.w],
                fuse_bias: b[self.fuse.b],
            },
        )
    }
}

/// Result of [`Student::forward`].
#[derive(Clone, Debug)]
pub struct StudentForward {
    /// Predicted latent map `[L, H, W]`.
    pub latent: Var,
    /// Encoder feature shapes for levels 0..=3.
    pub encoder_shapes: Vec<Vec<usize>>,
    /// Decoder feature shapes for levels 2, 1, 0.
    pub decoder_shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Student {
    config: StudentConfig,
    params: ParamStore,
    embed: ConvIds,
    encoder: Vec<Vec<BlockIds>>,
    down: Vec<ConvIds>,
    up: Vec<ConvIds>,
    decoder: Vec<Vec<BlockIds>>,
    refine: ConvIds,
    out_proj: ConvIds,
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn put(&mut self, name: String, t: Tensor) -> ParamId {
        self.params.add(name, t)
    }

    fn pointwise(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvIds {
        let w = uniform_fan_in(&mut self.rng, &[cout, cin, 1, 1], cin);
        let b = uniform_fan_in(&mut self.rng, &[cout], cin);
        ConvIds {
            w: self.put(format!("{prefix}.weight"), w),
            b: self.put(format!("{prefix}.bias"), b),
        }
    }

    fn dconv(&mut self, prefix: &str, cin: usize, cout: usize) -> DconvIds {
        let p = DconvParams::random(&mut self.rng, cin, cout);
        DconvIds {
            pw_w: self.put(format!("{prefix}.pw.weight"), p.pw_weight),
            pw_b: self.put(format!("{prefix}.pw.bias"), p.pw_bias),
            dw_w: self.put(format!("{prefix}.dw.weight"), p.dw_weight),
        }
    }

    fn block(&mut self, prefix: &str, channels: usize, heads: usize, hidden: usize) -> BlockIds {
        let ln_gamma = self.put(format!("{prefix}.mdta.ln.gamma"), Tensor::full(&[channels], 1.0));
        let ln_beta = self.put(format!("{prefix}.mdta.ln.beta"), Tensor::zeros(&[channels]));
        let query = self.dconv(&format!("{prefix}.mdta.query"), channels, channels);
        let key = self.dconv(&format!("{prefix}.mdta.key"), channels, channels);
        let value = self.dconv(&format!("{prefix}.mdta.value"), channels, channels);
        let proj = self.pointwise(&format!("{prefix}.mdta.proj"), channels, channels);
        let log_alpha = self.put(
            format!("{prefix}.mdta.log_alpha"),
            Tensor::scalar(initial_log_alpha(channels, heads)),
        );
        let gate1 = self.dconv(&format!("{prefix}.dgfn.gate1"), channels, hidden);
        let gate2 = self.dconv(&format!("{prefix}.dgfn.gate2"), channels, hidden);
        let fuse = self.pointwise(&format!("{prefix}.dgfn.fuse"), hidden, channels);
        BlockIds {
            ln_gamma,
            ln_beta,
            query,
            key,
            value,
            proj,
            log_alpha,
            heads,
            gate1,
            gate2,
            fuse,
        }
    }
}

impl Student {
    pub fn new(config: StudentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = config.base_width;
        let embed = b.pointwise(&format!("{STUDENT_GROUP}.embed"), 3, c);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..LEVELS {
            let ch = config.channels(l);
            let blocks = (0..config.encoder_blocks[l])
                .map(|i| {
                    b.block(
                        &format!("{STUDENT_GROUP}.encoder.level{l}.block{i}"),
                        ch,
                        config.heads_at(l),
                        ch * config.ffn_expansion,
                    )
                })
                .collect();
            encoder.push(blocks);
            if l + 1 < LEVELS {
                down.push(b.pointwise(&format!("{STUDENT_GROUP}.down{l}"), ch, 2 * ch));
            }
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..LEVELS - 1 {
            let ch = config.channels(l);
            up.push(b.pointwise(&format!("{STUDENT_GROUP}.up{l}"), 2 * ch, ch));
            let blocks = (0..config.decoder_blocks[l])
                .map(|i| {
                    b.block(
                        &format!("{STUDENT_GROUP}.decoder.level{l}.block{i}"),
                        ch,
                        config.heads_at(l),
                        ch * config.ffn_expansion,
                    )
                })
                .collect();
            decoder.push(blocks);
        }
        let refine = b.pointwise(&format!("{STUDENT_GROUP}.refine"), c, c);
        let out_proj = b.pointwise(&format!("{STUDENT_GROUP}.out_proj"), c, config.latent);
        Ok(Self {
            config,
            params,
            embed,
            encoder,
            down,
            up,
            decoder,
            refine,
            out_proj,
        })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Pointwise 3→C embedding of a `[3, H, W]` image.
    pub fn embed(&self, g: &mut Graph, bound: &Bound, rgb: Var) -> Result<Var> {
        let shape = g.shape(rgb).to_vec();
        ensure!(
            shape.len() == 3 && shape[0] == 3,
            InputShape,
            "student input must be [3, H, W], got {shape:?}"
        );
        check_input_size(shape[1], shape[2])?;
        g.conv2d_pointwise(rgb, bound[self.embed.w], bound[self.embed.b], 1)
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, rgb: Var) -> Result<StudentForward> {
        let x0 = self.embed(g, bound, rgb)?;
        let (height, width) = (g.shape(rgb)[1], g.shape(rgb)[2]);
        let expect = |g: &Graph, v: Var, level: usize, what: &str| -> Result<Vec<usize>> {
            let want = self.config.level_shape(level, height, width);
            let got = g.shape(v).to_vec();
            ensure!(
                got == want,
                Contract,
                "{what} level {level} has shape {got:?}, expected {want:?}"
            );
            Ok(got)
        };

        let mut skips = Vec::with_capacity(LEVELS);
        let mut encoder_shapes = Vec::with_capacity(LEVELS);
        let mut h = x0;
        for l in 0..LEVELS {
            if l > 0 {
                let d = self.down[l - 1];
                h = g.conv2d_pointwise(h, bound[d.w], bound[d.b], 2)?;
            }
            for block in &self.encoder[l] {
                let (attn, ffn) = block.vars(bound);
                h = dgfn(g, h, &attn, &ffn, None)?;
            }
            encoder_shapes.push(expect(g, h, l, "encoder")?);
            skips.push(h);
        }

        let mut decoder_shapes = Vec::with_capacity(LEVELS - 1);
        for l in (0..LEVELS - 1).rev() {
            let u = self.up[l];
            h = g.upsample2d_nearest(h, 2)?;
            h = g.conv2d_pointwise(h, bound[u.w], bound[u.b], 1)?;
            for (i, block) in self.decoder[l].iter().enumerate() {
                let (attn, ffn) = block.vars(bound);
                let skip = (i == 0).then_some(skips[l]);
                h = dgfn(g, h, &attn, &ffn, skip)?;
            }
            decoder_shapes.push(expect(g, h, l, "decoder")?);
        }

        let refined = g.conv2d_pointwise(h, bound[self.refine.w], bound[self.refine.b], 1)?;
        let restored = g.add(x0, refined)?;
        let latent = g.conv2d_pointwise(restored, bound[self.out_proj.w], bound[self.out_proj.b], 1)?;
        Ok(StudentForward {
            latent,
            encoder_shapes,
            decoder_shapes,
        })
    }

    /// Inference on one image, returning an `H × W × L` latent map.
    pub fn predict(&self, image: &RgbImage) -> Result<LatentMap> {
        check_input_size(image.height(), image.width())?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let rgb = g.constant(Tensor::new(
            vec![3, image.height(), image.width()],
            image.to_channel_first(),
        )?);
        let out = self.forward(&mut g, &bound, rgb)?;
        LatentMap::from_channel_first(
            image.height(),
            image.width(),
            self.config.latent,
            g.value(out.latent).data(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(h: usize, w: usize, seed: u64) -> RgbImage {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn level_shapes_follow_the_pyramid() {
        let s = Student::new(StudentConfig::new(6), 0).unwrap();
        let image = rgb(32, 32, 1);
        let mut g = Graph::new();
        let bound = s.params().bind(&mut g, |_| false);
        let x = g.constant(Tensor::new(vec![3, 32, 32], image.to_channel_first()).unwrap());
        let out = s.forward(&mut g, &bound, x).unwrap();
        for l in 0..LEVELS {
            assert_eq!(out.encoder_shapes[l], vec![16 << l, 32 >> l, 32 >> l]);
        }
        assert_eq!(out.encoder_shapes[3], vec![128, 4, 4]);
        assert_eq!(out.decoder_shapes, vec![vec![64, 8, 8], vec![32, 16, 16], vec![16, 32, 32]]);
        assert_eq!(g.shape(out.latent), &[6, 32, 32]);
    }

    #[test]
    fn embed_rejects_non_divisible_sizes() {
        let s = Student::new(StudentConfig::new(6), 0).unwrap();
        let image = RgbImage::new(30, 32, vec![0.0; 30 * 32 * 3]).unwrap();
        assert!(matches!(s.predict(&image), Err(Error::InputShape(_))));
    }

    #[test]
    fn embed_of_zero_image_with_zero_bias_is_zero() {
        let mut s = Student::new(StudentConfig::new(6), 0).unwrap();
        let b = s.params().id("student.embed.bias").unwrap();
        s.params_mut().get_mut(b).data_mut().fill(0.0);
        let mut g = Graph::new();
        let bound = s.params().bind(&mut g, |_| false);
        let x = g.constant(Tensor::zeros(&[3, 32, 32]));
        let e = s.embed(&mut g, &bound, x).unwrap();
        assert_eq!(g.shape(e), &[16, 32, 32]);
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_output_projection_gives_constant_map() {
        let mut s = Student::new(StudentConfig::new(4), 3).unwrap();
        let w = s.params().id("student.out_proj.weight").unwrap();
        s.params_mut().get_mut(w).data_mut().fill(0.0);
        let bias = s.params().by_name("student.out_proj.bias").unwrap().data().to_vec();
        let latent = s.predict(&rgb(8, 16, 2)).unwrap();
        for i in 0..8 {
            for j in 0..16 {
                assert_eq!(latent.pixel(i, j), &bias[..]);
            }
        }
    }

    #[test]
    fn mdta_rejects_indivisible_heads() {
        let p = MdtaParams::zeros(6, 4);
        let mut g = Graph::new();
        let vars = p.to_vars(&mut g, false);
        let x = g.constant(Tensor::zeros(&[6, 2, 2]));
        assert!(matches!(mdta(&mut g, x, &vars), Err(Error::Config(_))));
    }

    #[test]
    fn dgfn_rejects_mismatched_skip() {
        let attn = MdtaParams::zeros(4, 2);
        let ffn = DgfnParams::zeros(4, 8);
        let mut g = Graph::new();
        let (a, f) = (attn.to_vars(&mut g, false), ffn.to_vars(&mut g, false));
        let x = g.constant(Tensor::zeros(&[4, 2, 2]));
        let skip = g.constant(Tensor::zeros(&[4, 2, 4]));
        assert!(matches!(dgfn(&mut g, x, &a, &f, Some(skip)), Err(Error::Dimension(_))));
    }
    fn run_mdta(p: &MdtaParams, x: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let vars = p.to_vars(&mut g, false);
        let xv = g.constant(x.clone());
        let out = mdta_with_attention(&mut g, xv, &vars).unwrap();
        (g.value(out.output).clone(), g.value(out.attention).clone())
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        use rand::Rng;
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mdta_zero_projection_is_exact_identity() {
        let mut p = MdtaParams::random(1, 4, 2);
        p.proj_weight = Tensor::zeros(&[4, 4, 1, 1]);
        p.proj_bias = Tensor::zeros(&[4]);
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[4, 3, 5]);
        let (y, _) = run_mdta(&p, &x);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&y), bits(&x));
    }

    #[test]
    fn mdta_attention_rows_are_stochastic() {
        for seed in 0..5 {
            let p = MdtaParams::random(seed, 8, 2);
            let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed + 100), &[8, 4, 4]);
            let (_, attn) = run_mdta(&p, &x);
            assert_eq!(attn.shape(), &[2, 4, 4]);
            for row in attn.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mdta_zero_keys_give_uniform_channel_mixing() {
        let mut p = MdtaParams::random(3, 4, 2);
        p.key = DconvParams::zeros(4, 4);
        let mut proj = vec![0.0; 16];
        for c in 0..4 {
            proj[c * 4 + c] = 1.0;
        }
        p.proj_weight = Tensor::new(vec![4, 4, 1, 1], proj).unwrap();
        p.proj_bias = Tensor::zeros(&[4]);
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[4, 2, 2]);
        let (y, attn) = run_mdta(&p, &x);
        assert!(attn.data().iter().all(|&a| (a - 0.5).abs() < 1e-15));

        let mut g = Graph::new();
        let vars = p.to_vars(&mut g, false);
        let xv = g.constant(x.clone());
        let ln = g.layernorm(xv, vars.ln_gamma, vars.ln_beta).unwrap();
        let v = dconv(&mut g, ln, &vars.value).unwrap();
        let v = g.value(v).data().to_vec();
        for head in 0..2 {
            for px in 0..4 {
                let mean = (v[(2 * head) * 4 + px] + v[(2 * head + 1) * 4 + px]) / 2.0;
                for c in [2 * head, 2 * head + 1] {
                    let want = mean + x.data()[c * 4 + px];
                    assert!((y.data()[c * 4 + px] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mdta_single_pixel_matches_hand_computation() {
        let x: [f64; 2] = [0.3, -0.7];
        let mut p = MdtaParams::zeros(2, 1);
        p.ln_gamma = Tensor::from_vec(vec![1.5, 0.5]);
        p.ln_beta = Tensor::from_vec(vec![0.1, -0.2]);
        let conv = |w: [f64; 4], b: [f64; 2], centre: [f64; 2]| {
            let mut d = DconvParams::zeros(2, 2);
            d.pw_weight = Tensor::new(vec![2, 2, 1, 1], w.to_vec()).unwrap();
            d.pw_bias = Tensor::from_vec(b.to_vec());
            d.dw_weight.data_mut()[4] = centre[0];
            d.dw_weight.data_mut()[9 + 4] = centre[1];
            d
        };
        p.query = conv([0.4, -0.3, 0.2, 0.9], [0.05, -0.1], [1.2, 0.8]);
        p.key = conv([-0.6, 0.5, 0.7, 0.1], [0.2, 0.0], [0.9, -1.1]);
        p.value = conv([0.3, 0.3, -0.8, 0.6], [-0.05, 0.15], [1.0, 0.7]);
        p.proj_weight = Tensor::new(vec![2, 2, 1, 1], vec![0.5, -0.25, 0.75, 1.0]).unwrap();
        p.proj_bias = Tensor::from_vec(vec![0.01, -0.02]);
        p.log_alpha = Tensor::scalar(0.3);

        let mean = (x[0] + x[1]) / 2.0;
        let var = ((x[0] - mean).powi(2) + (x[1] - mean).powi(2)) / 2.0;
        let ln: Vec<f64> = (0..2)
            .map(|c| (x[c] - mean) / (var + 1e-6).sqrt() * p.ln_gamma.data()[c] + p.ln_beta.data()[c])
            .collect();
        let apply = |d: &DconvParams| -> Vec<f64> {
            (0..2)
                .map(|o| {
                    let w = d.pw_weight.data();
                    let pre = w[o * 2] * ln[0] + w[o * 2 + 1] * ln[1] + d.pw_bias.data()[o];
                    pre * d.dw_weight.data()[o * 9 + 4]
                })
                .collect()
        };
        let (q, k, v) = (apply(&p.query), apply(&p.key), apply(&p.value));
        let alpha = 0.3f64.exp();
        let mut attn = [[0.0; 2]; 2];
        for i in 0..2 {
            let logits = [k[i] * q[0] / alpha, k[i] * q[1] / alpha];
            let m = logits[0].max(logits[1]);
            let z = (logits[0] - m).exp() + (logits[1] - m).exp();
            attn[i] = [(logits[0] - m).exp() / z, (logits[1] - m).exp() / z];
        }
        let mixed = [
            attn[0][0] * v[0] + attn[0][1] * v[1],
            attn[1][0] * v[0] + attn[1][1] * v[1],
        ];
        let pw = p.proj_weight.data();
        let want = [
            pw[0] * mixed[0] + pw[1] * mixed[1] + 0.01 + x[0],
            pw[2] * mixed[0] + pw[3] * mixed[1] - 0.02 + x[1],
        ];
        let (y, a) = run_mdta(&p, &Tensor::new(vec![2, 1, 1], x.to_vec()).unwrap());
        for i in 0..2 {
            assert!((y.data()[i] - want[i]).abs() < 1e-12);
            for j in 0..2 {
                assert!((a.data()[i * 2 + j] - attn[i][j]).abs() < 1e-12);
            }
        }
    }

    fn run_dgfn(attn: &MdtaParams, ffn: &DgfnParams, x: &Tensor, skip: Option<&Tensor>) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let (a, f) = (attn.to_vars(&mut g, false), ffn.to_vars(&mut g, false));
        let xv = g.constant(x.clone());
        let sv = skip.map(|s| g.constant(s.clone()));
        let y = dgfn(&mut g, xv, &a, &f, sv).unwrap();
        let m = mdta(&mut g, xv, &a).unwrap();
        (g.value(y).clone(), g.value(m).clone())
    }

    #[test]
    fn dgfn_zero_gates_reduce_to_residual_paths() {
        let attn = MdtaParams::random(5, 4, 2);
        let mut ffn = DgfnParams::random(6, 4, 8);
        ffn.gate1 = DconvParams::zeros(4, 8);
        ffn.gate2 = DconvParams::zeros(4, 8);
        ffn.fuse_bias = Tensor::zeros(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, &[4, 2, 4]);
        let skip = random_tensor(&mut rng, &[4, 2, 4]);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let (y, m) = run_dgfn(&attn, &ffn, &x, None);
        assert_eq!(bits(&y), bits(&m));
        let (y, m) = run_dgfn(&attn, &ffn, &x, Some(&skip));
        let want: Vec<u64> = m.data().iter().zip(skip.data()).map(|(a, b)| (a + b).to_bits()).collect();
        assert_eq!(bits(&y), want);
    }

    #[test]
    fn dgfn_single_channel_matches_scalar_arithmetic() {
        // One channel: layer norm yields beta and attention is the 1×1 identity.
        let x: [f64; 2] = [0.4, -0.9];
        let mut attn = MdtaParams::zeros(1, 1);
        attn.ln_beta = Tensor::from_vec(vec![0.5]);
        attn.value.pw_weight = Tensor::new(vec![1, 1, 1, 1], vec![0.8]).unwrap();
        attn.value.pw_bias = Tensor::from_vec(vec![0.1]);
        attn.value.dw_weight = Tensor::new(vec![1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.3, 1.1, -0.4, 0.0, 0.0, 0.0]).unwrap();
        attn.proj_weight = Tensor::new(vec![1, 1, 1, 1], vec![0.6]).unwrap();
        attn.proj_bias = Tensor::from_vec(vec![0.05]);
        let mut ffn = DgfnParams::zeros(1, 1);
        let gate = |pw: f64, pb: f64, left: f64, centre: f64, right: f64| {
            let mut d = DconvParams::zeros(1, 1);
            d.pw_weight = Tensor::new(vec![1, 1, 1, 1], vec![pw]).unwrap();
            d.pw_bias = Tensor::from_vec(vec![pb]);
            d.dw_weight = Tensor::new(vec![1, 1, 3, 3], vec![0.0, 0.0, 0.0, left, centre, right, 0.0, 0.0, 0.0]).unwrap();
            d
        };
        ffn.gate1 = gate(1.3, -0.2, 0.5, 0.9, 0.2);
        ffn.gate2 = gate(-0.7, 0.4, 0.1, 1.2, -0.3);
        ffn.fuse_weight = Tensor::new(vec![1, 1, 1, 1], vec![1.5]).unwrap();
        ffn.fuse_bias = Tensor::from_vec(vec![-0.1]);

        let horizontal = |p: [f64; 2], left: f64, centre: f64, right: f64| {
            [centre * p[0] + right * p[1], left * p[0] + centre * p[1]]
        };
        let pre_v = 0.8 * 0.5 + 0.1;
        let v = horizontal([pre_v, pre_v], 0.3, 1.1, -0.4);
        let m = [0.6 * v[0] + 0.05 + x[0], 0.6 * v[1] + 0.05 + x[1]];
        let branch = |pw: f64, pb: f64, l: f64, c: f64, r: f64| {
            let h = horizontal([pw * m[0] + pb, pw * m[1] + pb], l, c, r);
            [gelu(h[0]), gelu(h[1])]
        };
        let g1 = branch(1.3, -0.2, 0.5, 0.9, 0.2);
        let g2 = branch(-0.7, 0.4, 0.1, 1.2, -0.3);
        let want = [1.5 * g1[0] * g2[0] - 0.1 + m[0], 1.5 * g1[1] * g2[1] - 0.1 + m[1]];

        let (y, _) = run_dgfn(&attn, &ffn, &Tensor::new(vec![1, 1, 2], x.to_vec()).unwrap(), None);
        for i in 0..2 {
            assert!((y.data()[i] - want[i]).abs() < 1e-12, "{} vs {}", y.data()[i], want[i]);
        }
    }

    fn tiny_config() -> StudentConfig {
        let mut cfg = StudentConfig::new(3);
        cfg.base_width = 4;
        cfg.heads = 2;
        cfg.encoder_blocks = [1, 1, 1, 1];
        cfg.decoder_blocks = [1, 1, 1];
        cfg
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for seed in 0..5 {
            let s = Student::new(tiny_config(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let mut g = Graph::new();
            let bound = s.params().bind(&mut g, |_| true);
            let x = g.constant(random_tensor(&mut rng, &[3, 8, 8]));
            let out = s.forward(&mut g, &bound, x).unwrap();
            let target = g.constant(random_tensor(&mut rng, &[3, 8, 8]));
            let d = g.sub(out.latent, target).unwrap();
            let d = g.abs(d).unwrap();
            let loss = g.mean(d).unwrap();
            g.backward(loss).unwrap();
            for (id, grad) in s.params().ids().zip(bound.grads(&g)) {
                let grad = grad.unwrap();
                assert!(grad.data().iter().any(|&v| v != 0.0), "seed {seed}: {} has zero gradient", s.params().name(id));
            }
        }
    }

    #[test]
    fn temperature_stays_positive_under_updates() {
        use crate::training::{optimizer_step, AdamState};
        let mut s = Student::new(tiny_config(), 1).unwrap();
        let mut state = AdamState::default();
        let grads: Vec<_> = s
            .params()
            .iter()
            .map(|(n, t)| n.ends_with("log_alpha").then(|| Tensor::full(t.shape(), 50.0)))
            .collect();
        for _ in 0..200 {
            optimizer_step(s.params_mut(), &grads, &mut state, 0.5, &[]).unwrap();
        }
        for (name, t) in s.params().iter().filter(|(n, _)| n.ends_with("log_alpha")) {
            let alpha = t.item().exp();
            assert!(alpha > 0.0 && alpha.is_finite(), "{name}: {alpha}");
        }
    }
}
