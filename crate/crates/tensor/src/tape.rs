//! Build-and-consume reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Node indices are a topological order by
//! construction, so [`Tape::backward`] walks them from the loss downwards.

use std::collections::HashMap;

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::kernels::conv::{self, ConvGeometry};
use crate::kernels::layout;
use crate::kernels::norm::{self, Grouping, View3};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set reachable through [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Conv2d { stride: usize, pad: usize },
    Relu,
    AvgPool { kernel: usize },
    Add,
    MulScalar(f64),
    Reshape(Vec<usize>),
    Mean { axis: usize },
    Var { axis: usize },
    /// `(1 − t)·a + t·b` with inputs `[a, b, t]`, `t` a one-element tensor.
    InterpolateLinear,
}

/// Batch statistics produced by [`Tape::standardize`].
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per group, for unbiased running-variance estimates.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    Relu { x: Var },
    Gelu { x: Var },
    AvgPool { x: Var, kh: usize, kw: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { x: Var, s: T },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    Concat { parts: Vec<Var>, axis: usize },
    ExpandLeading { x: Var, n: usize },
    Mean { x: Var, axis: usize },
    Variance { x: Var, axis: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    Standardize { x: Var, view: View3, grouping: Grouping, inv_std: Vec<T> },
    MulChannel { x: Var, s: Var, view: View3 },
    AddChannel { x: Var, s: Var, view: View3 },
    Lerp { a: Var, b: Var, t: Var },
    SoftmaxLast { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    retain: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    recording: bool,
    consumed: bool,
}

/// Gradients produced by one backward pass: every `requires_grad` leaf
/// reachable from the loss, plus nodes marked with [`Tape::retain_grad`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
    visited: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    /// Nodes whose backward rule ran, in execution order.
    pub fn visited(&self) -> &[Var] {
        &self.visited
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records operations for a later backward pass.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A tape for pure inference: values only, nothing requires grad.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keep the gradient of an intermediate node in the backward result.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A copy of `v` cut off from the graph: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            retain: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Generic entry point over the named primitive set.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match prim {
            Primitive::MatMul | Primitive::Conv2d { .. } | Primitive::Add => 2,
            Primitive::InterpolateLinear => 3,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(arg_err(
                "apply",
                format!("{prim:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        match prim {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Conv2d { stride, pad } => self.conv2d(inputs[0], inputs[1], *stride, *pad),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::AvgPool { kernel } => self.avg_pool2d(inputs[0], *kernel, *kernel),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::MulScalar(s) => self.mul_scalar(inputs[0], *s),
            Primitive::Reshape(shape) => self.reshape(inputs[0], shape.clone()),
            Primitive::Mean { axis } => self.mean(inputs[0], *axis),
            Primitive::Var { axis } => self.var(inputs[0], *axis),
            Primitive::InterpolateLinear => self.lerp(inputs[0], inputs[1], inputs[2]),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, T::zero());
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul { a, b }, rg)
    }

    /// Batched `[N, M, K] · [N, K, P]`, or `· [N, P, K]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (kb, p) = if trans_b { (sb.get(2), sb.get(1)) } else { (sb.get(1), sb.get(2)) };
        if !ok || kb != Some(&sa[2]) {
            return Err(shape_err("bmm", format!("{sa:?} · {sb:?} (trans_b={trans_b})")));
        }
        let (nb, m, k, p) = (sa[0], sa[1], sa[2], *p.unwrap());
        let mut out = vec![T::zero(); nb * m * p];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..nb {
            gemm(
                m,
                k,
                p,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * p..(i + 1) * k * p],
                trans_b,
                &mut out[i * m * p..(i + 1) * m * p],
                T::zero(),
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("bmm", Tensor::new([nb, m, p], out)?, Op::BatchMatMul { a, b, trans_b }, rg)
    }

    /// NCHW convolution with `[O, C, KH, KW]` weights, zero padding, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        if stride == 0 {
            return Err(arg_err("conv2d", "stride must be positive"));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel {:?} larger than padded input {:?}", &sw[2..], &sx[2..]),
            ));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
        };
        let out = conv::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let shape = [geom.batch, geom.out_channels, geom.out_h(), geom.out_w()];
        let rg = self.rg(x) || self.rg(w);
        self.push("conv2d", Tensor::new(shape, out)?, Op::Conv2d { x, w, geom }, rg)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push("relu", out, Op::Relu { x }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push("gelu", out, Op::Gelu { x }, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul { a, b }, rg)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push("mul_scalar", out, Op::MulScalar { x, s }, rg)
    }

    /// `(1 − t)·a + t·b`, `t` a one-element tensor. Exact at `t ∈ {0, 1}`.
    pub fn lerp(&mut self, a: Var, b: Var, t: Var) -> Result<Var> {
        if self.value(t).numel() != 1 {
            return Err(shape_err("interpolate_linear", format!("ratio has shape {:?}", self.shape(t))));
        }
        let tv = self.value(t).item();
        let out = if tv == T::zero() {
            same_shape("interpolate_linear", self.shape(a), self.shape(b))?;
            self.value(a).clone()
        } else if tv == T::one() {
            same_shape("interpolate_linear", self.shape(a), self.shape(b))?;
            self.value(b).clone()
        } else {
            let s = T::one() - tv;
            self.binary("interpolate_linear", a, b, |x, y| s * x + tv * y)?
        };
        let rg = self.rg(a) || self.rg(b) || self.rg(t);
        self.push("interpolate_linear", out, Op::Lerp { a, b, t }, rg)
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", out, Op::Reshape { x }, rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let (s, d) = layout::permute(self.value(x).data(), shape, perm);
        let rg = self.rg(x);
        self.push("permute", Tensor::new(s, d)?, Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let data = layout::narrow(self.value(x).data(), &shape, axis, start, len);
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        self.push("narrow", Tensor::new(out_shape, data)?, Op::Narrow { x, axis, start, len }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| arg_err("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = layout::split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat", Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// Repeat a tensor with leading dimension 1 `n` times along that dimension.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&1) {
            return Err(shape_err("expand_leading", format!("leading dim of {shape:?} is not 1")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let mut out_shape = shape;
        out_shape[0] = n;
        let rg = self.rg(x);
        self.push("expand_leading", Tensor::new(out_shape, data)?, Op::ExpandLeading { x, n }, rg)
    }

    // ---- reductions -----------------------------------------------------

    fn reduce_axis(&self, name: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = self.shape(x);
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err(name, format!("axis {axis} of {shape:?}")));
        }
        let (o, d, i) = layout::split_at_axis(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((o, d, i, out_shape))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, dim, inner, shape) = self.reduce_axis("mean", x, axis)?;
        let data = axis_means(self.value(x).data(), outer, dim, inner);
        let rg = self.rg(x);
        self.push("mean", Tensor::new(shape, data)?, Op::Mean { x, axis }, rg)
    }

    /// Population variance along `axis`.
    pub fn var(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, dim, inner, shape) = self.reduce_axis("var", x, axis)?;
        let src = self.value(x).data();
        let means = axis_means(src, outer, dim, inner);
        let n = T::of(dim as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    let dv = src[(o * dim + d) * inner + i] - means[o * inner + i];
                    data[o * inner + i] += dv * dv;
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= n);
        let rg = self.rg(x);
        self.push("var", Tensor::new(shape, data)?, Op::Variance { x, axis }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(shape_err("mean_all", "empty tensor"));
        }
        let m = v.sum() / T::of(v.numel() as f64);
        let rg = self.rg(x);
        self.push("mean_all", Tensor::scalar(m), Op::MeanAll { x }, rg)
    }

    /// Non-overlapping `kh × kw` average pooling over NCHW.
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kh == 0 || kw == 0 || !s[2].is_multiple_of(kh) || !s[3].is_multiple_of(kw) {
            return Err(shape_err("avg_pool", format!("kernel {kh}×{kw} on {s:?}")));
        }
        let (oh, ow) = (s[2] / kh, s[3] / kw);
        let src = self.value(x).data();
        let scale = T::one() / T::of((kh * kw) as f64);
        let mut data = vec![T::zero(); s[0] * s[1] * oh * ow];
        for plane in 0..s[0] * s[1] {
            let img = &src[plane * s[2] * s[3]..];
            for y in 0..s[2] {
                for x_ in 0..s[3] {
                    data[plane * oh * ow + (y / kh) * ow + x_ / kw] += img[y * s[3] + x_];
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= scale);
        let rg = self.rg(x);
        self.push("avg_pool", Tensor::new([s[0], s[1], oh, ow], data)?, Op::AvgPool { x, kh, kw }, rg)
    }

    // ---- normalization building blocks ------------------------------------

    /// Standardize groups of a `[outer, channels, inner]` view of `x`
    /// (zero mean, unit variance up to `eps`). Also returns the group stats.
    pub fn standardize(&mut self, x: Var, view: View3, grouping: Grouping, eps: f64) -> Result<(Var, GroupStats<T>)> {
        let numel = self.value(x).numel();
        if view.numel() != numel || view.group_len(grouping) == 0 {
            return Err(shape_err(
                "standardize",
                format!("view {view:?} over tensor {:?}", self.shape(x)),
            ));
        }
        let st = norm::standardize(self.value(x).data(), view, grouping, T::of(eps));
        let shape = self.shape(x).to_vec();
        let stats = GroupStats {
            mean: st.mean,
            var: st.var,
            count: view.group_len(grouping),
        };
        let rg = self.rg(x);
        let out = self.push(
            "standardize",
            Tensor::new(shape, st.normalized)?,
            Op::Standardize { x, view, grouping, inv_std: st.inv_std },
            rg,
        )?;
        Ok((out, stats))
    }

    fn channel_check(&self, name: &'static str, x: Var, s: Var, view: View3) -> Result<()> {
        if view.numel() != self.value(x).numel() || self.value(s).numel() != view.channels {
            return Err(shape_err(
                name,
                format!(
                    "view {view:?} over {:?} with per-channel vector {:?}",
                    self.shape(x),
                    self.shape(s)
                ),
            ));
        }
        Ok(())
    }

    /// Scale each channel of a `[outer, channels, inner]` view.
    pub fn mul_channel(&mut self, x: Var, s: Var, view: View3) -> Result<Var> {
        self.channel_check("mul_channel", x, s, view)?;
        let mut out = self.value(x).clone();
        let sv = self.value(s).data();
        for (i, row) in out.data_mut().chunks_mut(view.inner.max(1)).enumerate() {
            let k = sv[i % view.channels];
            row.iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(x) || self.rg(s);
        self.push("mul_channel", out, Op::MulChannel { x, s, view }, rg)
    }

    /// Shift each channel of a `[outer, channels, inner]` view.
    pub fn add_channel(&mut self, x: Var, s: Var, view: View3) -> Result<Var> {
        self.channel_check("add_channel", x, s, view)?;
        let mut out = self.value(x).clone();
        let sv = self.value(s).data();
        for (i, row) in out.data_mut().chunks_mut(view.inner.max(1)).enumerate() {
            let k = sv[i % view.channels];
            row.iter_mut().for_each(|v| *v += k);
        }
        let rg = self.rg(x) || self.rg(s);
        self.push("add_channel", out, Op::AddChannel { x, s, view }, rg)
    }

    /// `[n, c] + bias[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("add_bias", format!("input {s:?} is not 2-D")));
        }
        self.add_channel(x, bias, View3 { outer: s[0], channels: s[1], inner: 1 })
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ---- classification -----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(x);
        self.push("softmax", out, Op::SoftmaxLast { x }, rg)
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[label];
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = total / T::of(n as f64);
        let rg = self.rg(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        )
    }

    /// Scale each row of a `[n, d]` tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(shape_err("l2_normalize_rows", format!("input {s:?}")));
        }
        let eps = T::of(1e-12);
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(s[0]);
        for row in out.data_mut().chunks_mut(s[1]) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let rg = self.rg(x);
        self.push("l2_normalize_rows", out, Op::L2NormalizeRows { x, norms }, rg)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Consumes the tape: a second call
    /// fails with [`TensorError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_shape));
        let mut out = HashMap::new();
        let mut visited = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            visited.push(Var(i));
            if let Op::Leaf = node.op {
                out.insert(Var(i), g);
                continue;
            }
            let contributions = self.node_backward(i, &g)?;
            if node.retain {
                out.insert(Var(i), g);
            }
            for (v, dv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv)?,
                    slot => *slot = Some(dv),
                }
            }
        }
        for n in &mut self.nodes {
            n.op = Op::Leaf;
        }
        Ok(Gradients { grads: out, visited })
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape().to_vec(), data);
        let gd = g.data();
        let mut out = Vec::with_capacity(2);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if need(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, gd, false, val(*b).data(), true, &mut da, T::zero());
                    out.push((*a, like(*a, da)?));
                }
                if need(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*a).data(), true, gd, false, &mut db, T::zero());
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = val(*a).shape();
                let (nb, m, k) = (sa[0], sa[1], sa[2]);
                let p = g.shape()[2];
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if need(*a) {
                    let mut da = vec![T::zero(); nb * m * k];
                    for t in 0..nb {
                        let gs = &gd[t * m * p..(t + 1) * m * p];
                        let bs = &bd[t * k * p..(t + 1) * k * p];
                        // a·b: da = g·bᵀ; a·bᵀ: da = g·b
                        gemm(m, p, k, gs, false, bs, !trans_b, &mut da[t * m * k..(t + 1) * m * k], T::zero());
                    }
                    out.push((*a, like(*a, da)?));
                }
                if need(*b) {
                    let mut db = vec![T::zero(); nb * k * p];
                    for t in 0..nb {
                        let gs = &gd[t * m * p..(t + 1) * m * p];
                        let as_ = &ad[t * m * k..(t + 1) * m * k];
                        let dst = &mut db[t * k * p..(t + 1) * k * p];
                        if *trans_b {
                            gemm(p, m, k, gs, true, as_, false, dst, T::zero());
                        } else {
                            gemm(k, m, p, as_, true, gs, false, dst, T::zero());
                        }
                    }
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = conv::conv2d_backward(geom, val(*x).data(), val(*w).data(), gd, need(*x), need(*w));
                if let Some(dx) = dx {
                    out.push((*x, like(*x, dx)?));
                }
                if let Some(dw) = dw {
                    out.push((*w, like(*w, dw)?));
                }
            }
            Op::Relu { x } => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Gelu { x } => {
                let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                let three = T::of(3.0);
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dinner = c * (T::one() + three * a * v * v);
                        gv * (half * (T::one() + th) + half * v * (T::one() - th * th) * dinner)
                    })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Op::AvgPool { x, kh, kw } => {
                let s = val(*x).shape();
                let (oh, ow) = (s[2] / kh, s[3] / kw);
                let scale = T::one() / T::of((kh * kw) as f64);
                let mut d = vec![T::zero(); val(*x).numel()];
                for plane in 0..s[0] * s[1] {
                    for y in 0..s[2] {
                        for x_ in 0..s[3] {
                            d[plane * s[2] * s[3] + y * s[3] + x_] = gd[plane * oh * ow + (y / kh) * ow + x_ / kw] * scale;
                        }
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul { a, b } => {
                if need(*a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    out.push((*a, like(*a, d)?));
                }
                if need(*b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::MulScalar { x, s } => out.push((*x, g.map(|v| v * *s))),
            Op::Reshape { x } => out.push((*x, like(*x, gd.to_vec())?)),
            Op::Permute { x, perm } => {
                let (_, d) = layout::permute(gd, g.shape(), &layout::inverse_perm(perm));
                out.push((*x, like(*x, d)?));
            }
            Op::Narrow { x, axis, start, len } => {
                let d = layout::narrow_backward(gd, val(*x).shape(), *axis, *start, *len);
                out.push((*x, like(*x, d)?));
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if need(p) {
                        let d = layout::narrow(gd, g.shape(), *axis, offset, len);
                        out.push((p, like(p, d)?));
                    }
                    offset += len;
                }
            }
            Op::ExpandLeading { x, n } => {
                let len = val(*x).numel();
                let mut d = vec![T::zero(); len];
                for r in 0..*n {
                    for (acc, &v) in d.iter_mut().zip(&gd[r * len..(r + 1) * len]) {
                        *acc += v;
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Mean { x, axis } => {
                let (o, dim, inn) = layout::split_at_axis(val(*x).shape(), *axis);
                let scale = T::one() / T::of(dim as f64);
                let mut d = vec![T::zero(); o * dim * inn];
                for oi in 0..o {
                    for di in 0..dim {
                        for ii in 0..inn {
                            d[(oi * dim + di) * inn + ii] = gd[oi * inn + ii] * scale;
                        }
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::Variance { x, axis } => {
                let src = val(*x).data();
                let (o, dim, inn) = layout::split_at_axis(val(*x).shape(), *axis);
                let means = axis_means(src, o, dim, inn);
                let scale = T::of(2.0 / dim as f64);
                let mut d = vec![T::zero(); src.len()];
                for oi in 0..o {
                    for di in 0..dim {
                        for ii in 0..inn {
                            let idx = (oi * dim + di) * inn + ii;
                            d[idx] = gd[oi * inn + ii] * scale * (src[idx] - means[oi * inn + ii]);
                        }
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::SumAll { x } => out.push((*x, Tensor::full(val(*x).shape().to_vec(), gd[0]))),
            Op::MeanAll { x } => {
                let n = T::of(val(*x).numel() as f64);
                out.push((*x, Tensor::full(val(*x).shape().to_vec(), gd[0] / n)));
            }
            Op::Standardize { x, view, grouping, inv_std } => {
                let d = norm::standardize_backward(self.nodes[i].value.data(), inv_std, gd, *view, *grouping);
                out.push((*x, like(*x, d)?));
            }
            Op::MulChannel { x, s, view } => {
                let sv = val(*s).data();
                if need(*x) {
                    let mut d = gd.to_vec();
                    for (r, row) in d.chunks_mut(view.inner.max(1)).enumerate() {
                        let k = sv[r % view.channels];
                        row.iter_mut().for_each(|v| *v *= k);
                    }
                    out.push((*x, like(*x, d)?));
                }
                if need(*s) {
                    let mut ds = vec![T::zero(); view.channels];
                    let rows = gd.chunks(view.inner.max(1)).zip(val(*x).data().chunks(view.inner.max(1)));
                    for (r, (gr, xr)) in rows.enumerate() {
                        ds[r % view.channels] += gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    out.push((*s, like(*s, ds)?));
                }
            }
            Op::AddChannel { x, s, view } => {
                if need(*x) {
                    out.push((*x, g.clone()));
                }
                if need(*s) {
                    let mut ds = vec![T::zero(); view.channels];
                    for (r, gr) in gd.chunks(view.inner.max(1)).enumerate() {
                        ds[r % view.channels] += gr.iter().copied().sum::<T>();
                    }
                    out.push((*s, like(*s, ds)?));
                }
            }
            Op::Lerp { a, b, t } => {
                let tv = val(*t).item();
                if need(*a) {
                    out.push((*a, g.map(|v| v * (T::one() - tv))));
                }
                if need(*b) {
                    out.push((*b, g.map(|v| v * tv)));
                }
                if need(*t) {
                    let dt: T = gd
                        .iter()
                        .zip(val(*a).data().iter().zip(val(*b).data()))
                        .map(|(&gv, (&av, &bv))| gv * (bv - av))
                        .sum();
                    out.push((*t, like(*t, vec![dt])?));
                }
            }
            Op::SoftmaxLast { x } => {
                let y = self.nodes[i].value.data();
                let c = *g.shape().last().unwrap_or(&1);
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                out.push((*x, like(*x, d)?));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = val(*logits).shape()[1];
                let scale = gd[0] / T::of(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= scale;
                }
                out.push((*logits, like(*logits, d)?));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = self.nodes[i].value.data();
                let dcols = val(*x).shape()[1];
                let mut d = vec![T::zero(); y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let span = r * dcols..(r + 1) * dcols;
                    let dot: T = y[span.clone()].iter().zip(&gd[span.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in span {
                        d[j] = (gd[j] - y[j] * dot) / nrm;
                    }
                }
                out.push((*x, like(*x, d)?));
            }
        }
        Ok(out)
    }
}

fn axis_means<T: Scalar>(src: &[T], outer: usize, dim: usize, inner: usize) -> Vec<T> {
    let n = T::of(dim as f64);
    let mut means = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for d in 0..dim {
            for i in 0..inner {
                means[o * inner + i] += src[(o * dim + d) * inner + i];
            }
        }
    }
    means.iter_mut().for_each(|v| *v /= n);
    means
}
