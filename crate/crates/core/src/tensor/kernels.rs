//! Forward and backward kernels on flat row-major slices.
//!
//! Every kernel writes each output element from exactly one task and sums in a
//! fixed index order, so results do not depend on the thread count.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dDims {
    pub n: usize,
    pub cin: usize,
    pub lin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub lout: usize,
}

impl Conv1dDims {
    /// Output positions whose tap `kk` lands inside the input, and the input
    /// index of the first one. Consecutive outputs step by `stride`.
    #[inline]
    fn valid(&self, kk: usize) -> (std::ops::Range<usize>, usize) {
        let lo = if self.pad > kk { (self.pad - kk).div_ceil(self.stride) } else { 0 };
        let hi = if self.lin + self.pad > kk {
            (self.lin + self.pad - kk).div_ceil(self.stride).min(self.lout)
        } else {
            0
        };
        let lo = lo.min(hi);
        (lo..hi, (lo * self.stride + kk).saturating_sub(self.pad).min(self.lin))
    }
}

/// Unfolds `x: [n, cin, lin]` into columns `[cin * k, n * lout]`.
fn im2col(x: &[f64], d: Conv1dDims) -> Vec<f64> {
    let m = d.n * d.lout;
    let mut col = vec![0.0; d.cin * d.k * m];
    col.par_chunks_mut(m).enumerate().for_each(|(r, row)| {
        let (ci, kk) = (r / d.k, r % d.k);
        let (outs, first) = d.valid(kk);
        for n in 0..d.n {
            let xrow = &x[(n * d.cin + ci) * d.lin..(n * d.cin + ci + 1) * d.lin];
            let dst = &mut row[n * d.lout..(n + 1) * d.lout];
            for (v, xv) in dst[outs.clone()].iter_mut().zip(xrow[first..].iter().step_by(d.stride)) {
                *v = *xv;
            }
        }
    });
    col
}

/// `[n, c, l]` to `[c, n * l]`.
fn to_channel_major(y: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    out.par_chunks_mut(n * l).enumerate().for_each(|(ch, row)| {
        for (s, dst) in row.chunks_mut(l).enumerate() {
            dst.copy_from_slice(&y[(s * c + ch) * l..(s * c + ch + 1) * l]);
        }
    });
    out
}

/// `[c, n * l]` to `[n, c, l]`.
fn from_channel_major(y: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    out.par_chunks_mut(c * l).enumerate().for_each(|(s, block)| {
        for (ch, dst) in block.chunks_mut(l).enumerate() {
            dst.copy_from_slice(&y[ch * n * l + s * l..ch * n * l + (s + 1) * l]);
        }
    });
    out
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], d: Conv1dDims) -> Vec<f64> {
    let m = d.n * d.lout;
    let ck = d.cin * d.k;
    let col = im2col(x, d);
    let mut y = vec![0.0; d.cout * m];
    y.par_chunks_mut(m).enumerate().for_each(|(co, yrow)| {
        yrow.fill(b[co]);
        for (j, crow) in col.chunks(m).enumerate() {
            axpy(yrow, w[co * ck + j], crow);
        }
    });
    from_channel_major(&y, d.n, d.cout, d.lout)
}

pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: Conv1dDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = d.n * d.lout;
    let ck = d.cin * d.k;
    let g = to_channel_major(gy, d.n, d.cout, d.lout);
    let col = im2col(x, d);

    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; d.cout];
    dw.par_chunks_mut(ck)
        .zip(db.par_iter_mut())
        .enumerate()
        .for_each(|(co, (dwc, dbc))| {
            let grow = &g[co * m..(co + 1) * m];
            *dbc = grow.iter().sum();
            for (dv, crow) in dwc.iter_mut().zip(col.chunks(m)) {
                *dv = dot4(grow, crow);
            }
        });

    let mut dcol = vec![0.0; ck * m];
    dcol.par_chunks_mut(m).enumerate().for_each(|(j, drow)| {
        for (co, grow) in g.chunks(m).enumerate() {
            axpy(drow, w[co * ck + j], grow);
        }
    });
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(d.cin * d.lin).enumerate().for_each(|(n, dxn)| {
        for ci in 0..d.cin {
            let dxrow = &mut dxn[ci * d.lin..(ci + 1) * d.lin];
            for kk in 0..d.k {
                let (outs, first) = d.valid(kk);
                let src = &dcol[(ci * d.k + kk) * m + n * d.lout..(ci * d.k + kk) * m + (n + 1) * d.lout];
                for (dv, gv) in dxrow[first..].iter_mut().step_by(d.stride).zip(&src[outs]) {
                    *dv += gv;
                }
            }
        }
    });
    (dx, dw, db)
}

/// Non-overlapping max pooling along the last axis. Returns the pooled values
/// and, for each output, the flat input index that produced it.
pub(crate) fn maxpool1d_forward(x: &[f64], len: usize, window: usize) -> (Vec<f64>, Vec<usize>) {
    let rows = x.len() / len;
    let lo = len / window;
    let mut y = Vec::with_capacity(rows * lo);
    let mut arg = Vec::with_capacity(rows * lo);
    for r in 0..rows {
        for o in 0..lo {
            let start = r * len + o * window;
            let mut best = start;
            for i in start + 1..start + window {
                // strict comparison keeps the first maximum on ties
                if x[i] > x[best] {
                    best = i;
                }
            }
            y.push(x[best]);
            arg.push(best);
        }
    }
    (y, arg)
}

pub(crate) fn upsample1d_forward(x: &[f64], factor: usize) -> Vec<f64> {
    x.iter()
        .flat_map(|&v| std::iter::repeat_n(v, factor))
        .collect()
}

pub(crate) fn upsample1d_backward(gy: &[f64], factor: usize) -> Vec<f64> {
    gy.chunks(factor).map(|c| c.iter().sum()).collect()
}

pub(crate) fn linear_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    fin: usize,
    fout: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; n * fout];
    y.par_chunks_mut(fout).enumerate().for_each(|(r, yr)| {
        let xr = &x[r * fin..(r + 1) * fin];
        for (o, yv) in yr.iter_mut().enumerate() {
            let wr = &w[o * fin..(o + 1) * fin];
            *yv = b[o] + dot(wr, xr);
        }
    });
    y
}

pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    n: usize,
    fin: usize,
    fout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * fin];
    dx.par_chunks_mut(fin).enumerate().for_each(|(r, dxr)| {
        let gr = &gy[r * fout..(r + 1) * fout];
        for (o, g) in gr.iter().enumerate() {
            let wr = &w[o * fin..(o + 1) * fin];
            for (d, wv) in dxr.iter_mut().zip(wr) {
                *d += g * wv;
            }
        }
    });
    let mut dw = vec![0.0; fout * fin];
    let mut db = vec![0.0; fout];
    dw.par_chunks_mut(fin)
        .zip(db.par_iter_mut())
        .enumerate()
        .for_each(|(o, (dwr, dbo))| {
            for r in 0..n {
                let g = gy[r * fout + o];
                *dbo += g;
                let xr = &x[r * fin..(r + 1) * fin];
                for (d, xv) in dwr.iter_mut().zip(xr) {
                    *d += g * xv;
                }
            }
        });
    (dx, dw, db)
}

/// Source pixel (flat `h*w` index) for every output position of a strided
/// pointwise convolution.
pub(crate) fn strided_sources(h: usize, w: usize, stride: usize) -> Vec<usize> {
    let mut src = Vec::new();
    for i in (0..h).step_by(stride) {
        for j in (0..w).step_by(stride) {
            src.push(i * w + j);
        }
    }
    src
}

pub(crate) fn pointwise_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    hw: usize,
    src: &[usize],
) -> Vec<f64> {
    let cout = b.len();
    let p = src.len();
    let mut y = vec![0.0; cout * p];
    y.par_chunks_mut(p).enumerate().for_each(|(co, yrow)| {
        yrow.fill(b[co]);
        for ci in 0..cin {
            let wv = w[co * cin + ci];
            let xrow = &x[ci * hw..(ci + 1) * hw];
            for (yv, &s) in yrow.iter_mut().zip(src) {
                *yv += wv * xrow[s];
            }
        }
    });
    y
}

pub(crate) fn pointwise_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    cin: usize,
    cout: usize,
    hw: usize,
    src: &[usize],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = src.len();
    let mut dx = vec![0.0; cin * hw];
    dx.par_chunks_mut(hw).enumerate().for_each(|(ci, dxrow)| {
        for co in 0..cout {
            let wv = w[co * cin + ci];
            let grow = &gy[co * p..(co + 1) * p];
            for (g, &s) in grow.iter().zip(src) {
                dxrow[s] += wv * g;
            }
        }
    });
    let mut dw = vec![0.0; cout * cin];
    let mut db = vec![0.0; cout];
    dw.par_chunks_mut(cin)
        .zip(db.par_iter_mut())
        .enumerate()
        .for_each(|(co, (dwr, dbo))| {
            let grow = &gy[co * p..(co + 1) * p];
            *dbo = grow.iter().sum();
            for (ci, d) in dwr.iter_mut().enumerate() {
                let xrow = &x[ci * hw..(ci + 1) * hw];
                *d = grow.iter().zip(src).map(|(g, &s)| g * xrow[s]).sum();
            }
        });
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DepthwiseDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl DepthwiseDims {
    #[inline]
    fn src(&self, i: usize, j: usize, ki: usize, kj: usize) -> Option<usize> {
        let pad = (self.k / 2) as isize;
        let si = i as isize + ki as isize - pad;
        let sj = j as isize + kj as isize - pad;
        (si >= 0 && sj >= 0 && (si as usize) < self.h && (sj as usize) < self.w)
            .then(|| si as usize * self.w + sj as usize)
    }
}

pub(crate) fn depthwise_forward(x: &[f64], w: &[f64], d: DepthwiseDims) -> Vec<f64> {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    let mut y = vec![0.0; d.c * hw];
    y.par_chunks_mut(hw).enumerate().for_each(|(c, yc)| {
        let xc = &x[c * hw..(c + 1) * hw];
        let wc = &w[c * kk..(c + 1) * kk];
        for i in 0..d.h {
            for j in 0..d.w {
                let mut acc = 0.0;
                for ki in 0..d.k {
                    for kj in 0..d.k {
                        if let Some(s) = d.src(i, j, ki, kj) {
                            acc += wc[ki * d.k + kj] * xc[s];
                        }
                    }
                }
                yc[i * d.w + j] = acc;
            }
        }
    });
    y
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: DepthwiseDims,
) -> (Vec<f64>, Vec<f64>) {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    let mut dx = vec![0.0; d.c * hw];
    let mut dw = vec![0.0; d.c * kk];
    dx.par_chunks_mut(hw)
        .zip(dw.par_chunks_mut(kk))
        .enumerate()
        .for_each(|(c, (dxc, dwc))| {
            let xc = &x[c * hw..(c + 1) * hw];
            let wc = &w[c * kk..(c + 1) * kk];
            let gc = &gy[c * hw..(c + 1) * hw];
            for i in 0..d.h {
                for j in 0..d.w {
                    let g = gc[i * d.w + j];
                    for ki in 0..d.k {
                        for kj in 0..d.k {
                            if let Some(s) = d.src(i, j, ki, kj) {
                                dxc[s] += wc[ki * d.k + kj] * g;
                                dwc[ki * d.k + kj] += xc[s] * g;
                            }
                        }
                    }
                }
            }
        });
    (dx, dw)
}

pub(crate) fn upsample2d_forward(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut y = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                y[(ch * ho + i) * wo + j] = x[(ch * h + i / f) * w + j / f];
            }
        }
    }
    y
}

pub(crate) fn upsample2d_backward(gy: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                dx[(ch * h + i / f) * w + j / f] += gy[(ch * ho + i) * wo + j];
            }
        }
    }
    dx
}

/// Layer normalization over axis 0 of a `[c, m]` view. Returns the output, the
/// normalized values and the per-position inverse standard deviation.
pub(crate) fn layernorm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    c: usize,
    m: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; c * m];
    let mut inv_std = vec![0.0; m];
    for p in 0..m {
        let mean = (0..c).map(|ch| x[ch * m + p]).sum::<f64>() / c as f64;
        let var = (0..c).map(|ch| (x[ch * m + p] - mean).powi(2)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[p] = is;
        for ch in 0..c {
            xhat[ch * m + p] = (x[ch * m + p] - mean) * is;
        }
    }
    let y = xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| gamma[i / m] * v + beta[i / m])
        .collect();
    (y, xhat, inv_std)
}

pub(crate) fn layernorm_backward(
    gy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    c: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; c * m];
    for p in 0..m {
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for ch in 0..c {
            let g = gy[ch * m + p] * gamma[ch];
            mean_g += g;
            mean_gx += g * xhat[ch * m + p];
        }
        mean_g /= c as f64;
        mean_gx /= c as f64;
        for ch in 0..c {
            let i = ch * m + p;
            let g = gy[i] * gamma[ch];
            dx[i] = inv_std[p] * (g - mean_g - xhat[i] * mean_gx);
        }
    }
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        for p in 0..m {
            let i = ch * m + p;
            dgamma[ch] += gy[i] * xhat[i];
            dbeta[ch] += gy[i];
        }
    }
    (dx, dgamma, dbeta)
}

/// Softmax over the middle axis of an `[outer, len, inner]` view.
pub(crate) fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for a in 0..len {
                let e = (x[at(a)] - max).exp();
                y[at(a)] = e;
                sum += e;
            }
            for a in 0..len {
                y[at(a)] /= sum;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(
    y: &[f64],
    gy: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let dotp: f64 = (0..len).map(|a| y[at(a)] * gy[at(a)]).sum();
            for a in 0..len {
                dx[at(a)] = y[at(a)] * (gy[at(a)] - dotp);
            }
        }
    }
    dx
}

/// Batched `A · Bᵀ` for `A: [h, m, n]`, `B: [h, p, n]`.
pub(crate) fn bmm_nt(a: &[f64], b: &[f64], h: usize, m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut y = vec![0.0; h * m * p];
    y.par_chunks_mut(m * p).enumerate().for_each(|(hh, yh)| {
        let ah = &a[hh * m * n..(hh + 1) * m * n];
        let bh = &b[hh * p * n..(hh + 1) * p * n];
        for i in 0..m {
            for j in 0..p {
                yh[i * p + j] = dot(&ah[i * n..(i + 1) * n], &bh[j * n..(j + 1) * n]);
            }
        }
    });
    y
}

/// Batched `A · B` for `A: [h, m, k]`, `B: [h, k, n]`.
pub(crate) fn bmm(a: &[f64], b: &[f64], h: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; h * m * n];
    y.par_chunks_mut(m * n).enumerate().for_each(|(hh, yh)| {
        let ah = &a[hh * m * k..(hh + 1) * m * k];
        let bh = &b[hh * k * n..(hh + 1) * k * n];
        for i in 0..m {
            let yrow = &mut yh[i * n..(i + 1) * n];
            for kk in 0..k {
                let av = ah[i * k + kk];
                let brow = &bh[kk * n..(kk + 1) * n];
                for (yv, bv) in yrow.iter_mut().zip(brow) {
                    *yv += av * bv;
                }
            }
        }
    });
    y
}

/// Batched transpose of the last two axes of `[h, m, n]`.
pub(crate) fn transpose_last2(x: &[f64], h: usize, m: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for hh in 0..h {
        for i in 0..m {
            for j in 0..n {
                y[(hh * n + j) * m + i] = x[(hh * m + i) * n + j];
            }
        }
    }
    y
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-form GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
