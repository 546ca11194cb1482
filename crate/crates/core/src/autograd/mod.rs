//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Each op stores its
//! output value and whatever it needs for the backward pass. Calling
//! [`Tape::backward`] consumes the tape and returns a [`Gradients`] holding
//! the gradient of every leaf that requires one; parameter gradients are then
//! added into a [`ParamStore`] with [`Gradients::accumulate_into`], so two
//! backward passes without [`ParamStore::zero_grad`] in between accumulate.
//!
//! Only the operations the fusion model needs are provided. Elementwise
//! binary ops require identical shapes (no broadcasting).

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::nn::{BatchNormStats, ParamId, ParamStore};
use crate::tensor::Tensor;
use kernels::Padding;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

/// RMSE gradients divide by `max(rmse, RMSE_FLOOR)`.
pub const RMSE_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Var, mode: Padding },
    ConvTranspose { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Act { x: Var, kind: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    /// Activated gates `i, f, g, o` per row, `N×4H`.
    Lstm { x: Var, h: Var, c: Var, wx: Var, wh: Var, b: Var, gates: Vec<f64> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Rmse { pred: Var, target: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_kernel(op: &'static str, w: &Tensor) -> Result<()> {
    let s = w.shape();
    if s.len() != 4 || s[2] != 3 || s[3] != 3 {
        return Err(Error::shape(op, format!("kernel must be [a, b, 3, 3], got {s:?}")));
    }
    Ok(())
}

fn check_image(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected N×C×H×W input, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite() || !self.inputs_finite(&op), "non-finite output from finite inputs");
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        let parents: Vec<Var> = match op {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Act { x, .. } | Op::Reshape(x) | Op::Sum(x) | Op::Mean(x) | Op::Narrow { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Lstm { x, h, c, wx, wh, b, .. } => vec![*x, *h, *c, *wx, *wh, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Rmse { pred, target } => vec![*pred, *target],
        };
        parents.iter().all(|p| self.nodes[p.0].value.is_finite())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// 3×3 convolution, stride 1, reflection padding of width 1.
    ///
    /// `x`: `N×C×H×W`, `w`: `O×C×3×3`, `b`: `O`. Output `N×O×H×W`.
    pub fn conv2d_reflect(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv2d(x, w, b, Padding::Reflect)
    }

    /// 3×3 convolution, stride 1, zero padding of width 1.
    pub fn conv2d_zero(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv2d(x, w, b, Padding::Zero)
    }

    fn conv2d(&mut self, x: Var, w: Var, b: Var, mode: Padding) -> Result<Var> {
        const OP: &str = "conv2d";
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        check_kernel(OP, wt)?;
        let (n, c, h, wd) = check_image(OP, xt)?;
        let (o, ci) = (wt.shape()[0], wt.shape()[1]);
        if ci != c {
            return Err(Error::shape(OP, format!("input has {c} channels, kernel expects {ci}")));
        }
        if bt.shape() != [o] {
            return Err(Error::shape(OP, format!("bias shape {:?}, expected [{o}]", bt.shape())));
        }
        if mode == Padding::Reflect && (h < 2 || wd < 2) {
            return Err(Error::shape(OP, format!("reflection padding needs H, W >= 2, got {h}×{wd}")));
        }
        let hw = h * wd;
        let mut out = vec![0.0; n * o * hw];
        let mut padded = vec![0.0; c * (h + 2) * (wd + 2)];
        let mut cols = vec![0.0; c * 9 * hw];
        for s in 0..n {
            kernels::pad(&xt.data()[s * c * hw..(s + 1) * c * hw], c, h, wd, mode, &mut padded);
            kernels::im2col(&padded, c, h, wd, &mut cols);
            let y = &mut out[s * o * hw..(s + 1) * o * hw];
            for (oc, &bias) in bt.data().iter().enumerate() {
                y[oc * hw..(oc + 1) * hw].fill(bias);
            }
            kernels::gemm(o, hw, c * 9, 1.0, wt.data(), false, &cols, false, 1.0, y);
        }
        let value = Tensor::new(vec![n, o, h, wd], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Conv { x, w, b, mode }, rg))
    }

    /// 3×3 transposed convolution with stride 1 and padding 1, which keeps
    /// the spatial size. It is the adjoint of [`Tape::conv2d_zero`].
    ///
    /// `x`: `N×Ci×H×W`, `w`: `Ci×Co×3×3`, `b`: `Co`. Output `N×Co×H×W`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "conv2d_transpose";
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        check_kernel(OP, wt)?;
        let (n, ci, h, wd) = check_image(OP, xt)?;
        if wt.shape()[0] != ci {
            return Err(Error::shape(OP, format!("input has {ci} channels, kernel expects {}", wt.shape()[0])));
        }
        let co = wt.shape()[1];
        if bt.shape() != [co] {
            return Err(Error::shape(OP, format!("bias shape {:?}, expected [{co}]", bt.shape())));
        }
        let hw = h * wd;
        let mut out = vec![0.0; n * co * hw];
        let mut padded = vec![0.0; co * (h + 2) * (wd + 2)];
        let mut cols = vec![0.0; co * 9 * hw];
        for s in 0..n {
            let xs = &xt.data()[s * ci * hw..(s + 1) * ci * hw];
            kernels::gemm(co * 9, hw, ci, 1.0, wt.data(), true, xs, false, 0.0, &mut cols);
            padded.fill(0.0);
            kernels::col2im(&cols, co, h, wd, &mut padded);
            let y = &mut out[s * co * hw..(s + 1) * co * hw];
            for (oc, &bias) in bt.data().iter().enumerate() {
                y[oc * hw..(oc + 1) * hw].fill(bias);
            }
            kernels::pad_adjoint(&padded, co, h, wd, Padding::Zero, y);
        }
        let value = Tensor::new(vec![n, co, h, wd], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::ConvTranspose { x, w, b }, rg))
    }

    /// Per-channel batch normalisation over `N×H×W` of an `N×C×H×W` input.
    ///
    /// In training mode the batch statistics normalise the input and the
    /// running statistics are updated by momentum (running variance uses the
    /// unbiased batch variance). Otherwise the running statistics are used.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        training: bool,
    ) -> Result<Var> {
        const OP: &str = "batch_norm2d";
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c, h, w) = check_image(OP, xt)?;
        if gt.shape() != [c] || bt.shape() != [c] || stats.channels() != c {
            return Err(Error::shape(OP, format!("affine/stats must have {c} channels")));
        }
        if stats.eps <= 0.0 {
            return Err(Error::invalid("batch norm eps must be positive"));
        }
        let hw = h * w;
        let count = n * hw;
        if training && count < 2 {
            return Err(Error::invalid("batch norm in training mode needs at least 2 values per channel"));
        }
        let mut xhat = vec![0.0; xt.numel()];
        let mut out = vec![0.0; xt.numel()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let plane = |s: usize| &xt.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            let (mean, var) = if training {
                let mean = (0..n).map(|s| plane(s).iter().sum::<f64>()).sum::<f64>() / count as f64;
                let var = (0..n)
                    .map(|s| plane(s).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                    .sum::<f64>()
                    / count as f64;
                let m = stats.momentum;
                stats.running_mean[ch] = (1.0 - m) * stats.running_mean[ch] + m * mean;
                let unbiased = var * count as f64 / (count - 1) as f64;
                stats.running_var[ch] = (1.0 - m) * stats.running_var[ch] + m * unbiased;
                (mean, var)
            } else {
                (stats.running_mean[ch], stats.running_var[ch])
            };
            let is = 1.0 / (var + stats.eps).sqrt();
            inv_std[ch] = is;
            let (g, bb) = (gt.data()[ch], bt.data()[ch]);
            for s in 0..n {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xt.data()[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g * xh + bb;
                }
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, training }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
        };
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, Op::Act { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(at.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `x·wᵀ + b` with `x`: `N×D`, `w`: `M×D`, `b`: `M`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.ndim() != 2 || wt.ndim() != 2 || xt.shape()[1] != wt.shape()[1] {
            return Err(Error::shape(OP, format!("x {:?}, w {:?}", xt.shape(), wt.shape())));
        }
        let (n, d, m) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.shape() != [m] {
                return Err(Error::shape(OP, format!("bias {:?}, expected [{m}]", bt.shape())));
            }
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bt.data());
            }
        }
        kernels::gemm(n, m, d, 1.0, xt.data(), false, wt.data(), true, 1.0, &mut out);
        let value = Tensor::new(vec![n, m], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// One LSTM update, fused into a single node.
    ///
    /// `x`: `N×D`, `h`, `c`: `N×H`, `wx`: `4H×D`, `wh`: `4H×H`, `b`: `4H`,
    /// gate blocks ordered `i, f, g, o`. Returns `N×2H` rows `[h' | c']` with
    /// `c' = σ(f)⊙c + σ(i)⊙tanh(g)` and `h' = σ(o)⊙tanh(c')`.
    pub fn lstm_state(&mut self, x: Var, h: Var, c: Var, wx: Var, wh: Var, b: Var) -> Result<Var> {
        const OP: &str = "lstm";
        let (xt, ht, ct, wxt, wht, bt) =
            (self.value(x), self.value(h), self.value(c), self.value(wx), self.value(wh), self.value(b));
        if xt.ndim() != 2 || ht.ndim() != 2 || wht.ndim() != 2 || wxt.ndim() != 2 {
            return Err(Error::shape(OP, "x, h, wx, wh must be matrices"));
        }
        let (n, d, hs) = (xt.shape()[0], xt.shape()[1], ht.shape()[1]);
        if ht.shape() != [n, hs]
            || ct.shape() != [n, hs]
            || wxt.shape() != [4 * hs, d]
            || wht.shape() != [4 * hs, hs]
            || bt.shape() != [4 * hs]
        {
            return Err(Error::shape(
                OP,
                format!(
                    "x {:?}, h {:?}, c {:?}, wx {:?}, wh {:?}, b {:?}",
                    xt.shape(),
                    ht.shape(),
                    ct.shape(),
                    wxt.shape(),
                    wht.shape(),
                    bt.shape()
                ),
            ));
        }
        let g4 = 4 * hs;
        let mut gates = vec![0.0; n * g4];
        for row in gates.chunks_exact_mut(g4) {
            row.copy_from_slice(bt.data());
        }
        kernels::gemm(n, g4, d, 1.0, xt.data(), false, wxt.data(), true, 1.0, &mut gates);
        kernels::gemm(n, g4, hs, 1.0, ht.data(), false, wht.data(), true, 1.0, &mut gates);
        let mut out = vec![0.0; n * 2 * hs];
        for r in 0..n {
            let gr = &mut gates[r * g4..(r + 1) * g4];
            for k in 0..hs {
                let i = sigmoid(gr[k]);
                let f = sigmoid(gr[hs + k]);
                let g = gr[2 * hs + k].tanh();
                let o = sigmoid(gr[3 * hs + k]);
                gr[k] = i;
                gr[hs + k] = f;
                gr[2 * hs + k] = g;
                gr[3 * hs + k] = o;
                let cn = f * ct.data()[r * hs + k] + i * g;
                out[r * 2 * hs + hs + k] = cn;
                out[r * 2 * hs + k] = o * cn.tanh();
            }
        }
        let value = Tensor::new(vec![n, 2 * hs], out)?;
        let rg = self.rg(&[x, h, c, wx, wh, b]);
        Ok(self.push(value, Op::Lstm { x, h, c, wx, wh, b, gates }, rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.ndim() || start + len > xt.shape()[axis] {
            return Err(Error::shape("narrow", format!("{start}+{len} on axis {axis} of {:?}", xt.shape())));
        }
        let (outer, dim, inner) = axis_split(xt.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&xt.data()[base..base + len * inner]);
        }
        let mut shape = xt.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let ref_shape = self.value(*first).shape().to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {ref_shape:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == ref_shape.len()
                && s.iter().zip(&ref_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {ref_shape:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = ref_shape[..axis].iter().product();
        let inner: usize = ref_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// `sqrt(mean((pred - target)²))` over all elements.
    pub fn rmse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("rmse", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        if p.numel() == 0 {
            return Err(Error::invalid("rmse of an empty batch"));
        }
        let mse = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.numel() as f64;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(mse.sqrt()), Op::Rmse { pred, target }, rg))
    }

    /// Propagates gradients from a scalar `loss` back to every leaf that
    /// requires one. The tape is consumed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads)?;
        }
        let mut leaves = Vec::new();
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, true) = (&node.op, node.requires_grad) {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                if let Some(pid) = node.param {
                    params.push((pid, g.clone()));
                }
                leaves.push((Var(i), g));
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, mode } => self.conv_backward(*x, *w, *b, *mode, &g, grads)?,
            Op::ConvTranspose { x, w, b } => self.conv_transpose_backward(*x, *w, *b, &g, grads)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let (n, c, h, w) = check_image("batch_norm2d", &g)?;
                let hw = h * w;
                let count = (n * hw) as f64;
                let gamma_v = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    for s in 0..n {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += g.data()[i] * xhat[i];
                            dbeta[ch] += g.data()[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.numel()];
                    for ch in 0..c {
                        let scale = gamma_v[ch] * inv_std[ch];
                        for s in 0..n {
                            let off = (s * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = if *training {
                                    scale * (g.data()[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    scale * g.data()[i]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
                }
            }
            Op::Act { x, kind } => {
                let y = node.value.data();
                let data = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| match kind {
                        Activation::Relu => {
                            if yi > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        }
                        Activation::Sigmoid => gi * yi * (1.0 - yi),
                        Activation::Tanh => gi * (1.0 - yi * yi),
                    })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(p, q)| p * q).collect();
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(p, q)| p * q).collect();
                    accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, d, m) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm(n, d, m, 1.0, g.data(), false, wt.data(), false, 0.0, &mut dx);
                    accumulate(grads, *x, Tensor::new(vec![n, d], dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; m * d];
                    kernels::gemm(m, d, n, 1.0, g.data(), true, xt.data(), false, 0.0, &mut dw);
                    accumulate(grads, *w, Tensor::new(vec![m, d], dw)?);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks_exact(m) {
                        for (a, r) in db.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    accumulate(grads, b, Tensor::new(vec![m], db)?);
                }
            }
            Op::Lstm { x, h, c, wx, wh, b, gates } => {
                let (xt, ht, ct) = (self.value(*x), self.value(*h), self.value(*c));
                let (n, d, hs) = (xt.shape()[0], xt.shape()[1], ht.shape()[1]);
                let g4 = 4 * hs;
                let state = node.value.data();
                let mut da = vec![0.0; n * g4];
                let mut dc = vec![0.0; n * hs];
                for r in 0..n {
                    let gr = &gates[r * g4..(r + 1) * g4];
                    for k in 0..hs {
                        let (i, f, gg, o) = (gr[k], gr[hs + k], gr[2 * hs + k], gr[3 * hs + k]);
                        let tc = state[r * 2 * hs + hs + k].tanh();
                        let dh_next = g.data()[r * 2 * hs + k];
                        let dc_next = g.data()[r * 2 * hs + hs + k] + dh_next * o * (1.0 - tc * tc);
                        let a = &mut da[r * g4..(r + 1) * g4];
                        a[k] = dc_next * gg * i * (1.0 - i);
                        a[hs + k] = dc_next * ct.data()[r * hs + k] * f * (1.0 - f);
                        a[2 * hs + k] = dc_next * i * (1.0 - gg * gg);
                        a[3 * hs + k] = dh_next * tc * o * (1.0 - o);
                        dc[r * hs + k] = dc_next * f;
                    }
                }
                if self.needs(*c) {
                    accumulate(grads, *c, Tensor::new(vec![n, hs], dc)?);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm(n, d, g4, 1.0, &da, false, self.value(*wx).data(), false, 0.0, &mut dx);
                    accumulate(grads, *x, Tensor::new(vec![n, d], dx)?);
                }
                if self.needs(*h) {
                    let mut dh = vec![0.0; n * hs];
                    kernels::gemm(n, hs, g4, 1.0, &da, false, self.value(*wh).data(), false, 0.0, &mut dh);
                    accumulate(grads, *h, Tensor::new(vec![n, hs], dh)?);
                }
                if self.needs(*wx) {
                    let mut dw = vec![0.0; g4 * d];
                    kernels::gemm(g4, d, n, 1.0, &da, true, xt.data(), false, 0.0, &mut dw);
                    accumulate(grads, *wx, Tensor::new(vec![g4, d], dw)?);
                }
                if self.needs(*wh) {
                    let mut dw = vec![0.0; g4 * hs];
                    kernels::gemm(g4, hs, n, 1.0, &da, true, ht.data(), false, 0.0, &mut dw);
                    accumulate(grads, *wh, Tensor::new(vec![g4, hs], dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; g4];
                    for row in da.chunks_exact(g4) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![g4], db)?);
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.value(*x).shape().to_vec();
                let (outer, dim, inner) = axis_split(&xs, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::Concat { parts, axis } => {
                let inner: usize = g.shape()[axis + 1..].iter().product();
                let outer: usize = g.shape()[..*axis].iter().product();
                let total = g.shape()[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let ps = self.value(*p).shape().to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.needs(*p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        accumulate(grads, *p, Tensor::new(ps, d)?);
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, g.reshape(shape)?);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), gv));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let gv = g.data()[0] / t.numel() as f64;
                accumulate(grads, *x, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::Rmse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let r = node.value.data()[0].max(RMSE_FLOOR);
                let scale = g.data()[0] / (p.numel() as f64 * r);
                let d: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * scale).collect();
                if self.needs(*target) {
                    accumulate(grads, *target, Tensor::new(p.shape().to_vec(), d.iter().map(|v| -v).collect())?);
                }
                if self.needs(*pred) {
                    accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), d)?);
                }
            }
        }
        Ok(())
    }

    fn conv_backward(&self, x: Var, w: Var, b: Var, mode: Padding, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, c, h, wd) = check_image("conv2d", xt)?;
        let o = wt.shape()[0];
        let hw = h * wd;
        if self.needs(b) {
            let mut db = vec![0.0; o];
            for s in 0..n {
                for (oc, acc) in db.iter_mut().enumerate() {
                    *acc += g.data()[(s * o + oc) * hw..(s * o + oc + 1) * hw].iter().sum::<f64>();
                }
            }
            accumulate(grads, b, Tensor::new(vec![o], db)?);
        }
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        if !need_x && !need_w {
            return Ok(());
        }
        let mut padded = vec![0.0; c * (h + 2) * (wd + 2)];
        let mut cols = vec![0.0; c * 9 * hw];
        let mut dw = vec![0.0; wt.numel()];
        let mut dx = if need_x { vec![0.0; xt.numel()] } else { Vec::new() };
        for s in 0..n {
            let gs = &g.data()[s * o * hw..(s + 1) * o * hw];
            if need_w {
                kernels::pad(&xt.data()[s * c * hw..(s + 1) * c * hw], c, h, wd, mode, &mut padded);
                kernels::im2col(&padded, c, h, wd, &mut cols);
                kernels::gemm(o, c * 9, hw, 1.0, gs, false, &cols, true, 1.0, &mut dw);
            }
            if need_x {
                kernels::gemm(c * 9, hw, o, 1.0, wt.data(), true, gs, false, 0.0, &mut cols);
                padded.fill(0.0);
                kernels::col2im(&cols, c, h, wd, &mut padded);
                kernels::pad_adjoint(&padded, c, h, wd, mode, &mut dx[s * c * hw..(s + 1) * c * hw]);
            }
        }
        if need_w {
            accumulate(grads, w, Tensor::new(wt.shape().to_vec(), dw)?);
        }
        if need_x {
            accumulate(grads, x, Tensor::new(xt.shape().to_vec(), dx)?);
        }
        Ok(())
    }

    fn conv_transpose_backward(&self, x: Var, w: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, ci, h, wd) = check_image("conv2d_transpose", xt)?;
        let co = wt.shape()[1];
        let hw = h * wd;
        if self.needs(b) {
            let mut db = vec![0.0; co];
            for s in 0..n {
                for (oc, acc) in db.iter_mut().enumerate() {
                    *acc += g.data()[(s * co + oc) * hw..(s * co + oc + 1) * hw].iter().sum::<f64>();
                }
            }
            accumulate(grads, b, Tensor::new(vec![co], db)?);
        }
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        if !need_x && !need_w {
            return Ok(());
        }
        let mut padded = vec![0.0; co * (h + 2) * (wd + 2)];
        let mut gcols = vec![0.0; co * 9 * hw];
        let mut dw = vec![0.0; wt.numel()];
        let mut dx = if need_x { vec![0.0; xt.numel()] } else { Vec::new() };
        for s in 0..n {
            kernels::pad(&g.data()[s * co * hw..(s + 1) * co * hw], co, h, wd, Padding::Zero, &mut padded);
            kernels::im2col(&padded, co, h, wd, &mut gcols);
            if need_x {
                kernels::gemm(ci, hw, co * 9, 1.0, wt.data(), false, &gcols, false, 0.0, &mut dx[s * ci * hw..(s + 1) * ci * hw]);
            }
            if need_w {
                let xs = &xt.data()[s * ci * hw..(s + 1) * ci * hw];
                kernels::gemm(ci, co * 9, hw, 1.0, xs, false, &gcols, true, 1.0, &mut dw);
            }
        }
        if need_w {
            accumulate(grads, w, Tensor::new(wt.shape().to_vec(), dw)?);
        }
        if need_x {
            accumulate(grads, x, Tensor::new(xt.shape().to_vec(), dx)?);
        }
        Ok(())
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// where `f64` rounding would otherwise saturate.
pub fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaves: Vec<(Var, Tensor)>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g)
    }

    /// Adds every parameter-bound gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.grad_mut(*id).add_assign(g);
        }
    }
}
