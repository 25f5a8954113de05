//! Primitive applications recorded on a tape for reverse-mode autodiff.

use std::collections::HashMap;
use std::str::FromStr;

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub(crate) usize);

/// One differentiable primitive together with its attributes.
///
/// The set covers exactly what the inpainting network, its losses and the
/// mask embeddings need. Shapes follow the conventions noted per variant;
/// images are `[c, h, w]`, token grids `[h, w, c]` or `[n, c]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[m,k]x[k,n]` or batched `[b,m,k]x[b,k,n]`.
    Matmul,
    /// `x [ci,h,w]`, `w [co,ci,kh,kw]`, `b [co]`.
    Conv2d { stride: usize, pad: usize },
    /// Nearest-neighbor doubling of `[c,h,w]`.
    Upsample2xNearest,
    /// Non-overlapping `k x k` max pooling of `[c,h,w]` or `[h,w]`.
    Maxpool2d { k: usize },
    SoftmaxLastDim,
    /// `x [..,c]`, `gamma [c]`, `beta [c]`.
    LayerNormLastDim { eps: f64 },
    /// `x [..,ci]`, `w [ci,co]`, `b [co]`; the only broadcast is the bias add.
    Linear,
    Relu,
    Gelu,
    Add,
    Sub,
    Mul,
    /// Concatenate `[ci,h,w]` inputs along the channel axis.
    ConcatChannels,
    Reshape { shape: Vec<usize> },
    Permute { axes: Vec<usize> },
    /// Per-axis (before, after) zero padding.
    PadZero { pad: Vec<(usize, usize)> },
    /// Per-axis half-open index ranges.
    Slice { ranges: Vec<(usize, usize)> },
    /// Cyclic shift of a `[h,w,c]` grid; entry (i,j) moves to (i+dh, j+dw).
    Roll2d { dh: isize, dw: isize },
    Abs,
    Scale { factor: f64 },
    Softplus,
    SumAll,
    MeanAll,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Upsample2xNearest => "upsample2x_nearest",
            Primitive::Maxpool2d { .. } => "maxpool2d",
            Primitive::SoftmaxLastDim => "softmax_lastdim",
            Primitive::LayerNormLastDim { .. } => "layer_norm_lastdim",
            Primitive::Linear => "linear",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Permute { .. } => "permute",
            Primitive::PadZero { .. } => "pad_zero",
            Primitive::Slice { .. } => "slice",
            Primitive::Roll2d { .. } => "roll2d",
            Primitive::Abs => "abs",
            Primitive::Scale { .. } => "scale",
            Primitive::Softplus => "softplus",
            Primitive::SumAll => "sum_all",
            Primitive::MeanAll => "mean_all",
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    /// Resolve a primitive by name (attribute-carrying kinds get neutral
    /// defaults). Unknown names are rejected.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::Matmul,
            "conv2d" => Primitive::Conv2d { stride: 1, pad: 0 },
            "upsample2x_nearest" => Primitive::Upsample2xNearest,
            "maxpool2d" => Primitive::Maxpool2d { k: 2 },
            "softmax_lastdim" => Primitive::SoftmaxLastDim,
            "layer_norm_lastdim" => Primitive::LayerNormLastDim { eps: 1e-5 },
            "linear" => Primitive::Linear,
            "relu" => Primitive::Relu,
            "gelu" => Primitive::Gelu,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "concat_channels" => Primitive::ConcatChannels,
            "reshape" => Primitive::Reshape { shape: vec![] },
            "permute" => Primitive::Permute { axes: vec![] },
            "pad_zero" => Primitive::PadZero { pad: vec![] },
            "slice" => Primitive::Slice { ranges: vec![] },
            "roll2d" => Primitive::Roll2d { dh: 0, dw: 0 },
            "abs" => Primitive::Abs,
            "scale" => Primitive::Scale { factor: 1.0 },
            "softplus" => Primitive::Softplus,
            "sum_all" => Primitive::SumAll,
            "mean_all" => Primitive::MeanAll,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Record {
    pub prim: Primitive,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
}

/// Gradients of a scalar loss with respect to the tape's grad-tracked leaves.
#[derive(Debug, Default)]
pub struct Gradients<T: Scalar> {
    map: HashMap<TensorId, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&[T]> {
        self.map.get(&id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Value arena plus the ordered record of primitive applications.
///
/// A tape owns every tensor of one forward/backward pass. Applications are
/// recorded only while some input tracks gradients; [`Tape::backward`]
/// consumes the records and fills the `grad` slot of every grad-tracked leaf.
/// One tape is single-threaded; independent tapes are independent.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
    produced: Vec<bool>,
    records: Vec<Record>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), produced: Vec::new(), records: Vec::new() }
    }

    /// Insert a leaf tensor; its `requires_grad` flag decides tracking.
    pub fn leaf(&mut self, t: Tensor<T>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(t);
        self.produced.push(false);
        id
    }

    /// Insert a non-tracked leaf.
    pub fn constant(&mut self, mut t: Tensor<T>) -> TensorId {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Insert a grad-tracked leaf.
    pub fn param(&mut self, mut t: Tensor<T>) -> TensorId {
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].shape()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    /// Apply a forward primitive.
    ///
    /// Validates input count and shapes (errors name the primitive and the
    /// offending dimensions), computes the output, and records the
    /// application when any input tracks gradients. In debug builds a
    /// non-finite output is rejected with the primitive's name.
    pub fn apply(&mut self, prim: Primitive, inputs: &[TensorId]) -> Result<TensorId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::invalid(format!(
                    "{}: tensor id {} out of range",
                    prim.name(),
                    id.0
                )));
            }
        }
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0]).collect();
        let mut out = eval(&prim, &refs)?;
        if cfg!(debug_assertions) && !out.all_finite() {
            return Err(Error::NonFinite(prim.name().to_string()));
        }
        let track = refs.iter().any(|t| t.requires_grad);
        out.requires_grad = track;
        let id = TensorId(self.nodes.len());
        self.nodes.push(out);
        self.produced.push(true);
        if track {
            self.records.push(Record { prim, inputs: inputs.to_vec(), output: id });
        }
        Ok(id)
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Gradients accumulate additively across fan-out. Every grad-tracked
    /// leaf ends with a populated `grad` slot (zeros if the loss does not
    /// depend on it) and an entry in the returned map. The record list is
    /// consumed; a second backward on the same tape is rejected.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients<T>> {
        if self.records.is_empty() {
            return Err(Error::invalid("backward: empty tape".to_string()));
        }
        let loss_t = &self.nodes[loss.0];
        if !loss_t.is_scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                loss_t.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            let gout = match grads[rec.output.0].take() {
                Some(g) => g,
                None => continue, // output never used downstream of the loss
            };
            let needs: Vec<bool> =
                rec.inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
            let refs: Vec<&Tensor<T>> = rec.inputs.iter().map(|id| &self.nodes[id.0]).collect();
            let gins =
                super::backward::vjp(&rec.prim, &refs, &self.nodes[rec.output.0], &gout, &needs)?;
            for (slot, gin) in rec.inputs.iter().zip(gins.into_iter()) {
                if let Some(g) = gin {
                    match &mut grads[slot.0] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(g.iter()) {
                                *a = *a + *b;
                            }
                        }
                        none => *none = Some(g),
                    }
                }
            }
        }

        let mut map = HashMap::new();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad && !self.produced[i] {
                let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.numel()]);
                node.grad = Some(g.clone());
                map.insert(TensorId(i), g);
            }
        }
        Ok(Gradients { map })
    }

    // ----- convenience wrappers over `apply` -----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        self.apply(Primitive::Conv2d { stride, pad }, &[x, w, b])
    }

    pub fn upsample2x(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Upsample2xNearest, &[x])
    }

    pub fn maxpool2d(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        self.apply(Primitive::Maxpool2d { k }, &[x])
    }

    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::SoftmaxLastDim, &[x])
    }

    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        self.apply(Primitive::LayerNormLastDim { eps: 1e-5 }, &[x, gamma, beta])
    }

    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Linear, &[x, w, b])
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Gelu, &[x])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        self.apply(Primitive::ConcatChannels, xs)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        self.apply(Primitive::Permute { axes: axes.to_vec() }, &[x])
    }

    pub fn pad_zero(&mut self, x: TensorId, pad: &[(usize, usize)]) -> Result<TensorId> {
        self.apply(Primitive::PadZero { pad: pad.to_vec() }, &[x])
    }

    pub fn slice(&mut self, x: TensorId, ranges: &[(usize, usize)]) -> Result<TensorId> {
        self.apply(Primitive::Slice { ranges: ranges.to_vec() }, &[x])
    }

    pub fn roll2d(&mut self, x: TensorId, dh: isize, dw: isize) -> Result<TensorId> {
        self.apply(Primitive::Roll2d { dh, dw }, &[x])
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Abs, &[x])
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        self.apply(Primitive::Scale { factor }, &[x])
    }

    pub fn softplus(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Softplus, &[x])
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::SumAll, &[x])
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::MeanAll, &[x])
    }
}

fn shape_err<T>(prim: &Primitive, msg: String) -> Result<T> {
    Err(Error::Shape { op: prim.name(), msg })
}

/// Forward evaluation of one primitive (pure; no tape access).
fn eval<T: Scalar>(prim: &Primitive, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let arity_ok = |n: usize| -> Result<()> {
        if xs.len() == n {
            Ok(())
        } else {
            Err(Error::Shape {
                op: prim.name(),
                msg: format!("expected {n} inputs, got {}", xs.len()),
            })
        }
    };
    match prim {
        Primitive::Matmul => {
            arity_ok(2)?;
            let (a, b) = (xs[0], xs[1]);
            match (a.shape(), b.shape()) {
                ([m, k], [k2, n]) if k == k2 => {
                    let mut out = vec![T::zero(); m * n];
                    kernels::mm(a.data(), b.data(), *m, *k, *n, &mut out);
                    Tensor::from_vec(&[*m, *n], out)
                }
                ([ba, m, k], [bb, k2, n]) if k == k2 && ba == bb => {
                    let mut out = vec![T::zero(); ba * m * n];
                    for i in 0..*ba {
                        kernels::mm(
                            &a.data()[i * m * k..(i + 1) * m * k],
                            &b.data()[i * k * n..(i + 1) * k * n],
                            *m,
                            *k,
                            *n,
                            &mut out[i * m * n..(i + 1) * m * n],
                        );
                    }
                    Tensor::from_vec(&[*ba, *m, *n], out)
                }
                (sa, sb) => shape_err(prim, format!("incompatible shapes {sa:?} x {sb:?}")),
            }
        }
        Primitive::Conv2d { stride, pad } => {
            arity_ok(3)?;
            let (x, w, b) = (xs[0], xs[1], xs[2]);
            let (ci, h, wd) = match x.shape() {
                [c, h, w] => (*c, *h, *w),
                s => return shape_err(prim, format!("input must be [c,h,w], got {s:?}")),
            };
            let (co, ci2, kh, kw) = match w.shape() {
                [co, ci2, kh, kw] => (*co, *ci2, *kh, *kw),
                s => return shape_err(prim, format!("weight must be [co,ci,kh,kw], got {s:?}")),
            };
            if ci != ci2 {
                return shape_err(prim, format!("input channels {ci} != weight channels {ci2}"));
            }
            if b.shape() != [co] {
                return shape_err(prim, format!("bias {:?} must be [{co}]", b.shape()));
            }
            if *stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
                return shape_err(
                    prim,
                    format!("kernel {kh}x{kw} too large for {h}x{wd} with pad {pad}"),
                );
            }
            let ho = (h + 2 * pad - kh) / stride + 1;
            let wo = (wd + 2 * pad - kw) / stride + 1;
            let cols = kernels::im2col(x.data(), ci, h, wd, kh, kw, *stride, *pad, ho, wo);
            let mut out = vec![T::zero(); co * ho * wo];
            kernels::mm(w.data(), &cols, co, ci * kh * kw, ho * wo, &mut out);
            for (o, row) in out.chunks_mut(ho * wo).enumerate() {
                let bias = b.data()[o];
                for v in row.iter_mut() {
                    *v = *v + bias;
                }
            }
            Tensor::from_vec(&[co, ho, wo], out)
        }
        Primitive::Upsample2xNearest => {
            arity_ok(1)?;
            let x = xs[0];
            let (c, h, w) = match x.shape() {
                [c, h, w] => (*c, *h, *w),
                s => return shape_err(prim, format!("input must be [c,h,w], got {s:?}")),
            };
            let mut out = vec![T::zero(); c * 4 * h * w];
            let (ho, wo) = (2 * h, 2 * w);
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = x.data()[(ch * h + i) * w + j];
                        let base = ch * ho * wo;
                        out[base + (2 * i) * wo + 2 * j] = v;
                        out[base + (2 * i) * wo + 2 * j + 1] = v;
                        out[base + (2 * i + 1) * wo + 2 * j] = v;
                        out[base + (2 * i + 1) * wo + 2 * j + 1] = v;
                    }
                }
            }
            Tensor::from_vec(&[c, ho, wo], out)
        }
        Primitive::Maxpool2d { k } => {
            arity_ok(1)?;
            let x = xs[0];
            let (c, h, w, rank2) = match x.shape() {
                [c, h, w] => (*c, *h, *w, false),
                [h, w] => (1usize, *h, *w, true),
                s => return shape_err(prim, format!("input must be [c,h,w] or [h,w], got {s:?}")),
            };
            if *k == 0 || h % k != 0 || w % k != 0 {
                return shape_err(prim, format!("kernel {k} must divide {h}x{w}"));
            }
            let (ho, wo) = (h / k, w / k);
            let mut out = vec![T::zero(); c * ho * wo];
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut m = x.data()[(ch * h + i * k) * w + j * k];
                        for u in 0..*k {
                            for v in 0..*k {
                                let val = x.data()[(ch * h + i * k + u) * w + j * k + v];
                                if val > m {
                                    m = val;
                                }
                            }
                        }
                        out[(ch * ho + i) * wo + j] = m;
                    }
                }
            }
            let shape: Vec<usize> = if rank2 { vec![ho, wo] } else { vec![c, ho, wo] };
            Tensor::from_vec(&shape, out)
        }
        Primitive::SoftmaxLastDim => {
            arity_ok(1)?;
            let x = xs[0];
            let cols = *x.shape().last().ok_or_else(|| Error::Shape {
                op: prim.name(),
                msg: "rank must be >= 1".to_string(),
            })?;
            let rows = x.numel() / cols;
            let mut out = vec![T::zero(); x.numel()];
            kernels::softmax_rows(x.data(), rows, cols, &mut out);
            Tensor::from_vec(x.shape(), out)
        }
        Primitive::LayerNormLastDim { eps } => {
            arity_ok(3)?;
            let (x, gamma, beta) = (xs[0], xs[1], xs[2]);
            let c = *x.shape().last().unwrap_or(&0);
            if c == 0 || gamma.shape() != [c] || beta.shape() != [c] {
                return shape_err(
                    prim,
                    format!(
                        "x {:?} needs gamma/beta of shape [{c}], got {:?}/{:?}",
                        x.shape(),
                        gamma.shape(),
                        beta.shape()
                    ),
                );
            }
            let eps = T::from_f64(*eps);
            let rows = x.numel() / c;
            let mut out = vec![T::zero(); x.numel()];
            for r in 0..rows {
                let xr = &x.data()[r * c..(r + 1) * c];
                let yr = &mut out[r * c..(r + 1) * c];
                let mut mean = T::zero();
                for &v in xr {
                    mean = mean + v;
                }
                mean = mean / T::from_f64(c as f64);
                let mut var = T::zero();
                for &v in xr {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / T::from_f64(c as f64);
                let inv = T::one() / (var + eps).sqrt();
                for j in 0..c {
                    yr[j] = (xr[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
                }
            }
            Tensor::from_vec(x.shape(), out)
        }
        Primitive::Linear => {
            arity_ok(3)?;
            let (x, w, b) = (xs[0], xs[1], xs[2]);
            let (ci, co) = match w.shape() {
                [ci, co] => (*ci, *co),
                s => return shape_err(prim, format!("weight must be [ci,co], got {s:?}")),
            };
            if x.shape().last() != Some(&ci) {
                return shape_err(
                    prim,
                    format!("input {:?} last dim must equal weight rows {ci}", x.shape()),
                );
            }
            if b.shape() != [co] {
                return shape_err(prim, format!("bias {:?} must be [{co}]", b.shape()));
            }
            let rows = x.numel() / ci;
            let mut out = vec![T::zero(); rows * co];
            kernels::mm(x.data(), w.data(), rows, ci, co, &mut out);
            for row in out.chunks_mut(co) {
                for (v, &bias) in row.iter_mut().zip(b.data()) {
                    *v = *v + bias;
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = co;
            Tensor::from_vec(&shape, out)
        }
        Primitive::Relu => {
            arity_ok(1)?;
            let x = xs[0];
            let out = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
            Tensor::from_vec(x.shape(), out)
        }
        Primitive::Gelu => {
            arity_ok(1)?;
            let x = xs[0];
            let out = x.data().iter().map(|&v| kernels::gelu_val(v)).collect();
            Tensor::from_vec(x.shape(), out)
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            arity_ok(2)?;
            let (a, b) = (xs[0], xs[1]);
            if a.shape() != b.shape() {
                return shape_err(prim, format!("shapes {:?} vs {:?}", a.shape(), b.shape()));
            }
            let out = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| match prim {
                    Primitive::Add => x + y,
                    Primitive::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            Tensor::from_vec(a.shape(), out)
        }
        Primitive::ConcatChannels => {
            if xs.is_empty() {
                return shape_err(prim, "needs at least one input".to_string());
            }
            let (h, w) = match xs[0].shape() {
                [_, h, w] => (*h, *w),
                s => return shape_err(prim, format!("inputs must be [c,h,w], got {s:?}")),
            };
            let mut c_total = 0;
            for x in xs {
                match x.shape() {
                    [c, hh, ww] if *hh == h && *ww == w => c_total += c,
                    s => {
                        return shape_err(
                            prim,
                            format!("input {s:?} does not match [_,{h},{w}]"),
                        )
                    }
                }
            }
            let mut out = Vec::with_capacity(c_total * h * w);
            for x in xs {
                out.extend_from_slice(x.data());
            }
            Tensor::from_vec(&[c_total, h, w], out)
        }
        Primitive::Reshape { shape } => {
            arity_ok(1)?;
            let x = xs[0];
            let n: usize = shape.iter().product();
            if n != x.numel() {
                return shape_err(
                    prim,
                    format!("cannot reshape {:?} ({} elems) to {:?}", x.shape(), x.numel(), shape),
                );
            }
            Tensor::from_vec(shape, x.data().to_vec())
        }
        Primitive::Permute { axes } => {
            arity_ok(1)?;
            let x = xs[0];
            let rank = x.rank();
            let mut seen = vec![false; rank];
            let mut ok = axes.len() == rank;
            for &a in axes {
                if a >= rank || seen[a] {
                    ok = false;
                    break;
                }
                seen[a] = true;
            }
            if !ok {
                return shape_err(
                    prim,
                    format!("axes {axes:?} is not a permutation of 0..{rank}"),
                );
            }
            let out = kernels::permute(x.data(), x.shape(), axes);
            let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
            Tensor::from_vec(&shape, out)
        }
        Primitive::PadZero { pad } => {
            arity_ok(1)?;
            let x = xs[0];
            if pad.len() != x.rank() {
                return shape_err(
                    prim,
                    format!("pad spec {:?} does not match rank {}", pad, x.rank()),
                );
            }
            let out_shape: Vec<usize> =
                x.shape().iter().zip(pad).map(|(&e, &(b, a))| e + b + a).collect();
            let mut out = Tensor::zeros(&out_shape);
            let out_strides = kernels::strides_of(&out_shape);
            let base: usize = pad.iter().zip(&out_strides).map(|(&(b, _), &s)| b * s).sum();
            let mut idx = vec![0usize; x.rank()];
            for &v in x.data() {
                let mut dst = base;
                for d in 0..x.rank() {
                    dst += idx[d] * out_strides[d];
                }
                out.data_mut()[dst] = v;
                for d in (0..x.rank()).rev() {
                    idx[d] += 1;
                    if idx[d] < x.shape()[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            Ok(out)
        }
        Primitive::Slice { ranges } => {
            arity_ok(1)?;
            let x = xs[0];
            if ranges.len() != x.rank() {
                return shape_err(
                    prim,
                    format!("{} ranges for rank {}", ranges.len(), x.rank()),
                );
            }
            for (d, (&(s, e), &ext)) in ranges.iter().zip(x.shape()).enumerate() {
                if s >= e || e > ext {
                    return shape_err(
                        prim,
                        format!("range {s}..{e} invalid for axis {d} of extent {ext}"),
                    );
                }
            }
            let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
            let in_strides = kernels::strides_of(x.shape());
            let base: usize = ranges.iter().zip(&in_strides).map(|(&(s, _), &st)| s * st).sum();
            let n: usize = out_shape.iter().product();
            let mut out = Vec::with_capacity(n);
            let mut idx = vec![0usize; x.rank()];
            for _ in 0..n {
                let mut src = base;
                for d in 0..x.rank() {
                    src += idx[d] * in_strides[d];
                }
                out.push(x.data()[src]);
                for d in (0..x.rank()).rev() {
                    idx[d] += 1;
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            Tensor::from_vec(&out_shape, out)
        }
        Primitive::Roll2d { dh, dw } => {
            arity_ok(1)?;
            let x = xs[0];
            let (h, w, c) = match x.shape() {
                [h, w, c] => (*h, *w, *c),
                s => return shape_err(prim, format!("input must be [h,w,c], got {s:?}")),
            };
            let mut out = vec![T::zero(); x.numel()];
            for i in 0..h {
                let oi = (i as isize + dh).rem_euclid(h as isize) as usize;
                for j in 0..w {
                    let oj = (j as isize + dw).rem_euclid(w as isize) as usize;
                    let src = (i * w + j) * c;
                    let dst = (oi * w + oj) * c;
                    out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
            Tensor::from_vec(x.shape(), out)
        }
        Primitive::Abs => {
            arity_ok(1)?;
            let x = xs[0];
            Tensor::from_vec(x.shape(), x.data().iter().map(|v| v.abs()).collect())
        }
        Primitive::Scale { factor } => {
            arity_ok(1)?;
            let x = xs[0];
            let f = T::from_f64(*factor);
            Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v * f).collect())
        }
        Primitive::Softplus => {
            arity_ok(1)?;
            let x = xs[0];
            Tensor::from_vec(x.shape(), x.data().iter().map(|&v| kernels::softplus_val(v)).collect())
        }
        Primitive::SumAll | Primitive::MeanAll => {
            arity_ok(1)?;
            let x = xs[0];
            let mut s = T::zero();
            for &v in x.data() {
                s = s + v;
            }
            if matches!(prim, Primitive::MeanAll) {
                s = s / T::from_f64(x.numel() as f64);
            }
            Ok(Tensor::scalar(s))
        }
    }
}
