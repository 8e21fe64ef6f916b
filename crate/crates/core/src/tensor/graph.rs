use super::kernels::{self, Conv1dDims, DepthwiseDims};
use super::Tensor;
use crate::error::{ensure, Error, Result};

/// Epsilon added to the variance inside the square root of layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    Square(Var),
    Huber(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose {
        x: Var,
        h: usize,
        m: usize,
        n: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dims: Conv1dDims,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample1d {
        x: Var,
        factor: usize,
    },
    MeanLast {
        x: Var,
        len: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        fin: usize,
        fout: usize,
    },
    MulChannel {
        x: Var,
        gate: Var,
        len: usize,
    },
    Pointwise {
        x: Var,
        w: Var,
        b: Var,
        cin: usize,
        cout: usize,
        hw: usize,
        src: Vec<usize>,
    },
    Depthwise {
        x: Var,
        w: Var,
        dims: DepthwiseDims,
    },
    Upsample2d {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        factor: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        c: usize,
        m: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    BmmNt {
        a: Var,
        b: Var,
        h: usize,
        m: usize,
        n: usize,
        p: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        h: usize,
        m: usize,
        k: usize,
        n: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Huber(..) => "huber",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool1d { .. } => "maxpool1d",
            Op::Upsample1d { .. } => "upsample1d_nearest",
            Op::MeanLast { .. } => "mean_last",
            Op::Linear { .. } => "linear",
            Op::MulChannel { .. } => "mul_channel",
            Op::Pointwise { .. } => "conv2d_pointwise",
            Op::Depthwise { .. } => "conv2d_depthwise",
            Op::Upsample2d { .. } => "upsample2d_nearest",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax { .. } => "softmax",
            Op::BmmNt { .. } => "bmm_nt",
            Op::Bmm { .. } => "bmm",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape matches value"))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{} produced non-finite value {bad}",
                op.name()
            )));
        }
        let value = Tensor::new(shape, data)?;
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            Dimension,
            "{what}: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        ensure!(
            self.value(s).len() == 1,
            Dimension,
            "scale_by expects a one-element factor, got shape {:?}",
            self.shape(s)
        );
        let f = self.value(s).item();
        let data = self.data(x).iter().map(|v| v * f).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Elementwise Huber penalty with transition point `delta`.
    pub fn huber(&mut self, x: Var, delta: f64) -> Result<Var> {
        ensure!(delta > 0.0, Contract, "huber delta must be positive, got {delta}");
        self.unary(x, Op::Huber(x, delta), |e| {
            if e.abs() <= delta {
                0.5 * e * e
            } else {
                delta * (e.abs() - 0.5 * delta)
            }
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == self.value(x).len(),
            Dimension,
            "cannot reshape {:?} into {shape:?}",
            self.shape(x)
        );
        let data = self.data(x).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (h, m, n) = match shape[..] {
            [m, n] => (1, m, n),
            [h, m, n] => (h, m, n),
            _ => {
                return Err(Error::Dimension(format!(
                    "transpose expects rank 2 or 3, got {shape:?}"
                )))
            }
        };
        let data = kernels::transpose_last2(self.data(x), h, m, n);
        let mut out = shape;
        let r = out.len();
        out.swap(r - 2, r - 1);
        self.push(out, data, Op::Transpose { x, h, m, n }, &[x])
    }

    /// 1D cross-correlation with zero padding. `x` is `[cin, len]` or
    /// `[batch, cin, len]`, `w` is `[cout, cin, k]`, `b` is `[cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, cin, lin) = match xs[..] {
            [c, l] => (1, c, l),
            [n, c, l] => (n, c, l),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv1d input must be [cin, len] or [batch, cin, len], got {xs:?}"
                )))
            }
        };
        let ws = self.shape(w).to_vec();
        ensure!(ws.len() == 3, Dimension, "conv1d kernel must be [cout, cin, k], got {ws:?}");
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        ensure!(
            wcin == cin,
            Dimension,
            "conv1d kernel expects {wcin} input channels but input has {cin}"
        );
        ensure!(
            self.shape(b) == [cout],
            Dimension,
            "conv1d bias must be [{cout}], got {:?}",
            self.shape(b)
        );
        ensure!(stride >= 1, Contract, "conv1d stride must be at least 1");
        ensure!(
            k <= lin + 2 * padding,
            Dimension,
            "conv1d kernel length {k} exceeds padded input length {}",
            lin + 2 * padding
        );
        let lout = (lin + 2 * padding - k) / stride + 1;
        let dims = Conv1dDims {
            n,
            cin,
            lin,
            cout,
            k,
            stride,
            pad: padding,
            lout,
        };
        let data = kernels::conv1d_forward(self.data(x), self.data(w), self.data(b), dims);
        let shape = if xs.len() == 2 {
            vec![cout, lout]
        } else {
            vec![n, cout, lout]
        };
        self.push(shape, data, Op::Conv1d { x, w, b, dims }, &[x, w, b])
    }

    /// Non-overlapping max pooling along the last axis; a trailing remainder
    /// shorter than `window` is dropped.
    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        ensure!(window >= 1, Contract, "maxpool1d window must be at least 1");
        let mut shape = self.shape(x).to_vec();
        let len = *shape.last().expect("non-empty shape");
        ensure!(
            window <= len,
            EmptyOutput,
            "maxpool1d window {window} exceeds axis length {len}"
        );
        let (data, argmax) = kernels::maxpool1d_forward(self.data(x), len, window);
        *shape.last_mut().unwrap() = len / window;
        self.push(shape, data, Op::MaxPool1d { x, argmax }, &[x])
    }

    pub fn upsample1d_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        ensure!(factor >= 1, Contract, "upsample factor must be at least 1");
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() *= factor;
        let data = kernels::upsample1d_forward(self.data(x), factor);
        self.push(shape, data, Op::Upsample1d { x, factor }, &[x])
    }

    /// Mean over the last axis, which is removed from the shape.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let len = shape.pop().unwrap();
        if shape.is_empty() {
            shape.push(1);
        }
        let data = self
            .data(x)
            .chunks(len)
            .map(|c| c.iter().sum::<f64>() / len as f64)
            .collect();
        self.push(shape, data, Op::MeanLast { x, len }, &[x])
    }

    /// Affine map `x · wᵀ + b` for `x: [n, fin]` (or `[fin]`), `w: [fout, fin]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, fin) = match xs[..] {
            [f] => (1, f),
            [n, f] => (n, f),
            _ => {
                return Err(Error::Dimension(format!(
                    "linear input must be [n, features], got {xs:?}"
                )))
            }
        };
        let ws = self.shape(w).to_vec();
        ensure!(
            ws.len() == 2 && ws[1] == fin,
            Dimension,
            "linear weight {ws:?} does not accept {fin} input features"
        );
        let fout = ws[0];
        ensure!(
            self.shape(b) == [fout],
            Dimension,
            "linear bias must be [{fout}], got {:?}",
            self.shape(b)
        );
        let data = kernels::linear_forward(self.data(x), self.data(w), self.data(b), n, fin, fout);
        let shape = if xs.len() == 1 {
            vec![fout]
        } else {
            vec![n, fout]
        };
        self.push(
            shape,
            data,
            Op::Linear {
                x,
                w,
                b,
                n,
                fin,
                fout,
            },
            &[x, w, b],
        )
    }

    /// Scales each last-axis row of `x` by the matching entry of `gate`, whose
    /// shape equals `x`'s shape without the last axis.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() >= 2, Dimension, "mul_channel input must have rank >= 2");
        ensure!(
            self.shape(gate) == &xs[..xs.len() - 1],
            Dimension,
            "mul_channel gate {:?} does not match input {xs:?}",
            self.shape(gate)
        );
        let len = *xs.last().unwrap();
        let gv = self.data(gate);
        let data = self
            .data(x)
            .chunks(len)
            .zip(gv)
            .flat_map(|(row, &g)| row.iter().map(move |v| v * g))
            .collect();
        self.push(xs, data, Op::MulChannel { x, gate, len }, &[x, gate])
    }

    /// 1×1 convolution over `[c, h, w]` with optional spatial stride.
    pub fn conv2d_pointwise(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 3, Dimension, "pointwise conv input must be [c, h, w], got {xs:?}");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w).to_vec();
        ensure!(
            ws.len() == 4 && ws[2] == 1 && ws[3] == 1,
            Dimension,
            "pointwise kernel must be [cout, cin, 1, 1], got {ws:?}"
        );
        ensure!(
            ws[1] == cin,
            Dimension,
            "pointwise kernel expects {} channels but input has {cin}",
            ws[1]
        );
        let cout = ws[0];
        ensure!(
            self.shape(b) == [cout],
            Dimension,
            "pointwise bias must be [{cout}], got {:?}",
            self.shape(b)
        );
        ensure!(stride >= 1, Contract, "pointwise stride must be at least 1");
        let src = kernels::strided_sources(h, wd, stride);
        let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
        let data =
            kernels::pointwise_forward(self.data(x), self.data(w), self.data(b), cin, h * wd, &src);
        self.push(
            vec![cout, ho, wo],
            data,
            Op::Pointwise {
                x,
                w,
                b,
                cin,
                cout,
                hw: h * wd,
                src,
            },
            &[x, w, b],
        )
    }

    /// Per-channel k×k convolution (odd k, padding k/2, stride 1) without bias.
    pub fn conv2d_depthwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 3, Dimension, "depthwise conv input must be [c, h, w], got {xs:?}");
        let ws = self.shape(w).to_vec();
        ensure!(
            ws.len() == 4 && ws[1] == 1 && ws[2] == ws[3] && ws[2] % 2 == 1,
            Dimension,
            "depthwise kernel must be [c, 1, k, k] with odd k, got {ws:?}"
        );
        ensure!(
            ws[0] == xs[0],
            Dimension,
            "depthwise kernel has {} channels but input has {}",
            ws[0],
            xs[0]
        );
        let dims = DepthwiseDims {
            c: xs[0],
            h: xs[1],
            w: xs[2],
            k: ws[2],
        };
        let data = kernels::depthwise_forward(self.data(x), self.data(w), dims);
        self.push(xs, data, Op::Depthwise { x, w, dims }, &[x, w])
    }

    pub fn upsample2d_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 3, Dimension, "upsample2d input must be [c, h, w], got {xs:?}");
        ensure!(factor >= 1, Contract, "upsample factor must be at least 1");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let data = kernels::upsample2d_forward(self.data(x), c, h, w, factor);
        self.push(
            vec![c, h * factor, w * factor],
            data,
            Op::Upsample2d {
                x,
                c,
                h,
                w,
                factor,
            },
            &[x],
        )
    }

    /// Layer normalization across axis 0 (channels) independently at every
    /// remaining position, followed by a per-channel affine map.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        let m = self.value(x).len() / c;
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            Dimension,
            "layernorm affine parameters must be [{c}]"
        );
        let (data, xhat, inv_std) = kernels::layernorm_forward(
            self.data(x),
            self.data(gamma),
            self.data(beta),
            c,
            m,
            LAYERNORM_EPS,
        );
        self.push(
            xs,
            data,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                c,
                m,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(
            axis < xs.len(),
            Dimension,
            "softmax axis {axis} out of range for shape {xs:?}"
        );
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let data = kernels::softmax_forward(self.data(x), outer, len, inner);
        self.push(
            xs,
            data,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Batched `a · bᵀ` for `a: [h, m, n]`, `b: [h, p, n]` giving `[h, m, p]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2],
            Dimension,
            "bmm_nt shapes {sa:?} and {sb:?} are incompatible"
        );
        let (h, m, n, p) = (sa[0], sa[1], sa[2], sb[1]);
        let data = kernels::bmm_nt(self.data(a), self.data(b), h, m, n, p);
        self.push(vec![h, m, p], data, Op::BmmNt { a, b, h, m, n, p }, &[a, b])
    }

    /// Batched `a · b` for `a: [h, m, k]`, `b: [h, k, n]` giving `[h, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            Dimension,
            "bmm shapes {sa:?} and {sb:?} are incompatible"
        );
        let (h, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let data = kernels::bmm(self.data(a), self.data(b), h, m, k, n);
        self.push(vec![h, m, n], data, Op::Bmm { a, b, h, m, k, n }, &[a, b])
    }

    /// Reverse pass from a one-element `loss`. Afterwards every leaf with
    /// `requires_grad` holds a gradient (zeros if it does not influence the
    /// loss). Intermediate gradients are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).len() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        for g in &mut self.grads {
            *g = None;
        }
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let g = self.grads[i].get_or_insert_with(|| vec![0.0; node.value.len()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for leaf node {i}"
                )));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&Self) -> Vec<f64>) {
        if self.nodes[v.0].requires_grad {
            let c = f(self);
            self.accumulate(v, c);
        }
    }

    fn backprop_node(&mut self, i: usize, gy: &[f64]) {
        // Temporarily move the op out so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out = Var(i);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, gy.to_vec());
                self.accumulate(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, gy.to_vec());
                self.accumulate(*b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate_with(a, |s| zip_map(gy, s.data(b), |g, y| g * y));
                self.accumulate_with(b, |s| zip_map(gy, s.data(a), |g, x| g * x));
            }
            Op::Scale(x, f) => self.accumulate(*x, gy.iter().map(|g| g * f).collect()),
            Op::ScaleBy(x, s) => {
                let (x, s) = (*x, *s);
                self.accumulate_with(x, |g| {
                    let f = g.value(s).item();
                    gy.iter().map(|v| v * f).collect()
                });
                self.accumulate_with(s, |g| vec![kernels::dot(gy, g.data(x))]);
            }
            Op::Exp(x) => {
                let d = zip_map(gy, self.data(out), |g, y| g * y);
                self.accumulate(*x, d);
            }
            Op::Relu(x) => {
                let d = zip_map(gy, self.data(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(gy, self.data(out), |g, y| g * y * (1.0 - y));
                self.accumulate(*x, d);
            }
            Op::Gelu(x) => {
                let d = zip_map(gy, self.data(*x), |g, v| g * kernels::gelu_grad(v));
                self.accumulate(*x, d);
            }
            Op::Abs(x) => {
                let d = zip_map(gy, self.data(*x), |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(*x, d);
            }
            Op::Square(x) => {
                let d = zip_map(gy, self.data(*x), |g, v| 2.0 * g * v);
                self.accumulate(*x, d);
            }
            Op::Huber(x, delta) => {
                let delta = *delta;
                let d = zip_map(gy, self.data(*x), |g, e| g * e.clamp(-delta, delta));
                self.accumulate(*x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![gy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![gy[0] / n as f64; n]);
            }
            Op::Reshape(x) => self.accumulate(*x, gy.to_vec()),
            Op::Transpose { x, h, m, n } => {
                self.accumulate(*x, kernels::transpose_last2(gy, *h, *n, *m));
            }
            Op::Conv1d { x, w, b, dims } => {
                let (dx, dw, db) =
                    kernels::conv1d_backward(self.data(*x), self.data(*w), gy, *dims);
                self.accumulate(*x, dx);
                self.accumulate(*w, dw);
                self.accumulate(*b, db);
            }
            Op::MaxPool1d { x, argmax } => {
                let x = *x;
                self.accumulate_with(x, |s| {
                    let mut dx = vec![0.0; s.value(x).len()];
                    for (&src, g) in argmax.iter().zip(gy) {
                        dx[src] += g;
                    }
                    dx
                });
            }
            Op::Upsample1d { x, factor } => {
                self.accumulate(*x, kernels::upsample1d_backward(gy, *factor));
            }
            Op::MeanLast { x, len } => {
                let len = *len;
                let d = gy
                    .iter()
                    .flat_map(|g| std::iter::repeat_n(g / len as f64, len))
                    .collect();
                self.accumulate(*x, d);
            }
            Op::Linear {
                x,
                w,
                b,
                n,
                fin,
                fout,
            } => {
                let (dx, dw, db) =
                    kernels::linear_backward(self.data(*x), self.data(*w), gy, *n, *fin, *fout);
                self.accumulate(*x, dx);
                self.accumulate(*w, dw);
                self.accumulate(*b, db);
            }
            Op::MulChannel { x, gate, len } => {
                let (x, gate, len) = (*x, *gate, *len);
                self.accumulate_with(x, |s| {
                    gy.chunks(len)
                        .zip(s.data(gate))
                        .flat_map(|(row, &g)| row.iter().map(move |v| v * g))
                        .collect()
                });
                self.accumulate_with(gate, |s| {
                    gy.chunks(len)
                        .zip(s.data(x).chunks(len))
                        .map(|(g, xr)| kernels::dot(g, xr))
                        .collect()
                });
            }
            Op::Pointwise {
                x,
                w,
                b,
                cin,
                cout,
                hw,
                src,
            } => {
                let (dx, dw, db) = kernels::pointwise_backward(
                    self.data(*x),
                    self.data(*w),
                    gy,
                    *cin,
                    *cout,
                    *hw,
                    src,
                );
                self.accumulate(*x, dx);
                self.accumulate(*w, dw);
                self.accumulate(*b, db);
            }
            Op::Depthwise { x, w, dims } => {
                let (dx, dw) = kernels::depthwise_backward(self.data(*x), self.data(*w), gy, *dims);
                self.accumulate(*x, dx);
                self.accumulate(*w, dw);
            }
            Op::Upsample2d {
                x,
                c,
                h,
                w,
                factor,
            } => {
                self.accumulate(*x, kernels::upsample2d_backward(gy, *c, *h, *w, *factor));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                c,
                m,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) =
                    kernels::layernorm_backward(gy, xhat, inv_std, self.data(*gamma), *c, *m);
                self.accumulate(*x, dx);
                self.accumulate(*gamma, dg);
                self.accumulate(*beta, db);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let d = kernels::softmax_backward(self.data(out), gy, *outer, *len, *inner);
                self.accumulate(*x, d);
            }
            Op::BmmNt { a, b, h, m, n, p } => {
                let (a, b, h, m, n, p) = (*a, *b, *h, *m, *n, *p);
                // dA = G · B, dB = Gᵀ · A
                self.accumulate_with(a, |s| kernels::bmm(gy, s.data(b), h, m, p, n));
                self.accumulate_with(b, |s| {
                    let gt = kernels::transpose_last2(gy, h, m, p);
                    kernels::bmm(&gt, s.data(a), h, p, m, n)
                });
            }
            Op::Bmm { a, b, h, m, k, n } => {
                let (a, b, h, m, k, n) = (*a, *b, *h, *m, *k, *n);
                // dA = G · Bᵀ, dB = Aᵀ · G
                self.accumulate_with(a, |s| kernels::bmm_nt(gy, s.data(b), h, m, n, k));
                self.accumulate_with(b, |s| {
                    let at = kernels::transpose_last2(s.data(a), h, m, k);
                    kernels::bmm(&at, gy, h, k, m, n)
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn conv1d_example() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = g.constant(t(&[1, 1, 3], &[1.0, 0.0, -1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[-2.0, -2.0, 2.0]);
    }

    #[test]
    fn conv1d_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 5]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv1d(x, w, b, 1, 1), Err(Error::Dimension(_))));
        let w = g.constant(Tensor::zeros(&[1, 2, 9]));
        assert!(matches!(g.conv1d(x, w, b, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_and_layernorm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);

        let x = g.constant(t(&[2, 1], &[1.0, 3.0]));
        let gamma = g.constant(t(&[2], &[1.0, 1.0]));
        let beta = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.layernorm(x, gamma, beta).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn maxpool_keeps_first_of_ties_and_rejects_empty_output() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 4], &[3.0, 3.0, 1.0, 2.0]));
        let y = g.maxpool1d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        let short = g.constant(t(&[1, 1], &[1.0]));
        assert!(matches!(g.maxpool1d(short, 2), Err(Error::EmptyOutput(_))));
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn pointwise_stride_and_upsample_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4, 6], 1.0));
        let w = g.constant(Tensor::full(&[3, 2, 1, 1], 0.5));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.conv2d_pointwise(x, w, b, 2).unwrap();
        assert_eq!(g.shape(y), &[3, 2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
        let u = g.upsample2d_nearest(y, 2).unwrap();
        assert_eq!(g.shape(u), &[3, 4, 6]);
    }

    #[test]
    fn depthwise_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, h, w, k) = (2, 4, 5, 3);
        let xv = random(&mut rng, &[c, h, w]);
        let wv = random(&mut rng, &[c, 1, k, k]);
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let wt = g.constant(wv.clone());
        let y = g.conv2d_depthwise(x, wt).unwrap();
        for ch in 0..c {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = 0.0;
                    for di in -1..=1isize {
                        for dj in -1..=1isize {
                            let (ii, jj) = (i + di, j + dj);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            let xi = ch * h * w + ii as usize * w + jj as usize;
                            let wi = ch * 9 + (di + 1) as usize * 3 + (dj + 1) as usize;
                            acc += xv.data()[xi] * wv.data()[wi];
                        }
                    }
                    let got = g.value(y).data()[ch * h * w + i as usize * w + j as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batched_products_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, m, k, n) = (2, 3, 4, 5);
        let a = random(&mut rng, &[h, m, k]);
        let b = random(&mut rng, &[h, k, n]);
        let c = random(&mut rng, &[h, n, k]);
        let mut g = Graph::new();
        let (va, vb, vc) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(c.clone()));
        let ab = g.bmm(va, vb).unwrap();
        let act = g.bmm_nt(va, vc).unwrap();
        for z in 0..h {
            for i in 0..m {
                for j in 0..n {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for q in 0..k {
                        s1 += a.data()[(z * m + i) * k + q] * b.data()[(z * k + q) * n + j];
                        s2 += a.data()[(z * m + i) * k + q] * c.data()[(z * n + j) * k + q];
                    }
                    assert!((g.value(ab).data()[(z * m + i) * n + j] - s1).abs() < 1e-12);
                    assert!((g.value(act).data()[(z * m + i) * n + j] - s2).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points = [
                random(&mut rng, &[2, 3, 4]),
                random(&mut rng, &[2, 2, 1, 1]),
                random(&mut rng, &[2]),
                random(&mut rng, &[2, 1, 3, 3]),
            ];
            let check = grad_check_many(
                |g, v| {
                    let y = g.conv2d_pointwise(v[0], v[1], v[2], 1)?;
                    let y = g.conv2d_depthwise(y, v[3])?;
                    let y = g.gelu(y)?;
                    let y = g.softmax(y, 2)?;
                    let y = g.square(y)?;
                    g.sum(y)
                },
                &points,
                1e-6,
            )
            .unwrap();
            assert!(check.passed(), "seed {seed}: {check:?}");
        }
    }
}
