//! Reverse-mode automatic differentiation on dense tensors.
//!
//! A [`Tape`] records operations eagerly: every op computes its forward value
//! immediately and appends a node, so the node list is always in topological
//! order. [`Tape::backward`] walks the nodes in reverse, accumulating
//! gradients in a fixed order, which makes gradients deterministic for a
//! fixed op schedule.
//!
//! The op set is intentionally small: exactly what the attention layers,
//! binarization layer, comparator CNN, transformer encoder, NetVLAD and
//! selector MLP need. Leaves that do not require gradients never receive
//! gradient storage.

mod math;

use std::cell::RefCell;
use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{num_elements, Tensor, TensorError};
use math::*;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown value id {0} on this tape; run the forward pass on this graph first")]
    UnknownValue(usize),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShapeMismatch { seed: Vec<usize>, output: Vec<usize> },
    #[error("finite-difference check requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("unknown leaf '{0}'")]
    UnknownLeaf(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Permute { input: usize, axes: Vec<usize> },
    Reshape { input: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    SliceAxis { input: usize, axis: usize, start: usize },
    SumAll(usize),
    MeanAll(usize),
    SumAxis { input: usize, axis: usize },
    MeanAxis { input: usize, axis: usize },
    MaxAxis { input: usize, axis: usize, argmax: Vec<usize> },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Htanh(usize),
    Erf(usize),
    Abs(usize),
    SoftmaxLast(usize),
    LayerNorm { input: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormAffine { input: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    Conv2dSame { input: usize, weight: usize, bias: usize },
    MaxPool2x2 { input: usize, argmax: Vec<usize> },
    PadSymmetric2d { input: usize, pads: [usize; 4] },
    BroadcastAddRow { input: usize, row: usize },
    MulExpandLast { input: usize, weights: usize },
    L2Normalize { input: usize, norm: f64 },
    NetVladAggregate { assign: usize, input: usize, centers: usize },
    BceWithLogitsMean { logits: usize, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
///
/// Leaves that do not require gradients have no entry at all.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

/// An eager op tape. Single-threaded by design; distinct tapes may run on
/// distinct threads concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

macro_rules! shape_err {
    ($op:expr, $($arg:tt)*) => {
        return Err(AutodiffError::ShapeMismatch { op: $op, detail: format!($($arg)*) })
    };
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Binds a tensor as a leaf; its `requires_grad` flag decides whether
    /// backward produces a gradient for it.
    pub fn leaf(&self, tensor: Tensor) -> Var {
        let requires = tensor.requires_grad();
        self.push(tensor, requires, Op::Leaf)
    }

    /// Binds a tensor as a non-differentiable constant.
    pub fn constant(&self, tensor: Tensor) -> Var {
        self.push(tensor, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        Var { id: nodes.len() - 1 }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    // ---- elementwise binary ----

    fn binary(&self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, Vec<usize>)> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
        if ta.shape() != tb.shape() {
            shape_err!(op_name, "{:?} vs {:?}", ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((data, ta.shape().to_vec()))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (data, shape) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Tensor::new(shape, data)?, self.requires(&[a.id, b.id]), Op::Add(a.id, b.id)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (data, shape) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Tensor::new(shape, data)?, self.requires(&[a.id, b.id]), Op::Sub(a.id, b.id)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (data, shape) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Tensor::new(shape, data)?, self.requires(&[a.id, b.id]), Op::Mul(a.id, b.id)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes.borrow()[a.id].value.map(|x| x * c);
        Ok(self.push(value, self.requires(&[a.id]), Op::Scale(a.id, c)))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes.borrow()[a.id].value.map(|x| x + c);
        Ok(self.push(value, self.requires(&[a.id]), Op::AddScalar(a.id)))
    }

    // ---- unary activations ----

    fn unary(&self, a: Var, op: impl Fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes.borrow()[a.id].value.map(f);
        self.push(value, self.requires(&[a.id]), op(a.id))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    /// Hard tanh: identity clamped to [-1, 1].
    pub fn htanh(&self, a: Var) -> Var {
        self.unary(a, Op::Htanh, |x| x.clamp(-1.0, 1.0))
    }

    pub fn erf(&self, a: Var) -> Var {
        self.unary(a, Op::Erf, libm::erf)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs, f64::abs)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                shape_err!("matmul", "{:?} x {:?}", ta.shape(), tb.shape());
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            Tensor::new(vec![m, n], matmul_nn(ta.data(), tb.data(), m, k, n))?
        };
        Ok(self.push(value, self.requires(&[a.id, b.id]), Op::MatMul(a.id, b.id)))
    }

    /// Contracts the last axis of `a` against the last axis of `b`, producing
    /// a tensor shaped as `a`'s prefix followed by `b`'s prefix. This is the
    /// tensor-dot primitive behind all region-pair similarity calculations;
    /// arbitrary contraction axes reduce to it via [`Tape::permute`].
    pub fn contract_last(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.is_empty() || sb.is_empty() || sa[sa.len() - 1] != sb[sb.len() - 1] {
            shape_err!("contract_last", "{sa:?} vs {sb:?}");
        }
        let d = sa[sa.len() - 1];
        let ra = num_elements(&sa[..sa.len() - 1]);
        let rb = num_elements(&sb[..sb.len() - 1]);
        let a2 = self.reshape(a, vec![ra, d])?;
        let b2 = self.reshape(b, vec![rb, d])?;
        let bt = self.permute(b2, &[1, 0])?;
        let prod = self.matmul(a2, bt)?;
        let mut out_shape: Vec<usize> = sa[..sa.len() - 1].to_vec();
        out_shape.extend_from_slice(&sb[..sb.len() - 1]);
        self.reshape(prod, out_shape)
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.id].value;
            if !is_permutation(axes, ta.rank()) {
                shape_err!("permute", "axes {axes:?} invalid for rank {}", ta.rank());
            }
            let (data, shape) = permute_forward(ta.data(), ta.shape(), axes);
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, self.requires(&[a.id]), Op::Permute { input: a.id, axes: axes.to_vec() }))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes.borrow()[a.id].value.reshaped(shape)?;
        Ok(self.push(value, self.requires(&[a.id]), Op::Reshape { input: a.id }))
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            shape_err!("concat", "no inputs");
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].id].value.shape().to_vec();
            if axis >= first.len() {
                shape_err!("concat", "axis {axis} out of range for rank {}", first.len());
            }
            let mut axis_total = 0usize;
            for p in parts {
                let s = nodes[p.id].value.shape();
                if s.len() != first.len()
                    || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
                {
                    shape_err!("concat", "{s:?} vs {first:?} along axis {axis}");
                }
                axis_total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = axis_total;
            let inner: usize = first[axis + 1..].iter().product();
            let outer: usize = first[..axis].iter().product();
            let mut data = vec![0.0; num_elements(&shape)];
            let out_step = axis_total * inner;
            let mut offset = 0usize;
            for p in parts {
                let t = &nodes[p.id].value;
                let step = t.shape()[axis] * inner;
                for o in 0..outer {
                    let src = &t.data()[o * step..(o + 1) * step];
                    data[o * out_step + offset..o * out_step + offset + step].copy_from_slice(src);
                }
                offset += step;
            }
            Tensor::new(shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let requires = self.requires(&ids);
        Ok(self.push(value, requires, Op::Concat { inputs: ids, axis }))
    }

    pub fn slice_axis(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            let s = t.shape();
            if axis >= s.len() || start + len > s[axis] {
                shape_err!("slice_axis", "range {start}..{} on axis {axis} of {s:?}", start + len);
            }
            let inner: usize = s[axis + 1..].iter().product();
            let outer: usize = s[..axis].iter().product();
            let mut shape = s.to_vec();
            shape[axis] = len;
            let mut data = Vec::with_capacity(num_elements(&shape));
            let in_step = s[axis] * inner;
            for o in 0..outer {
                let base = o * in_step + start * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, self.requires(&[a.id]), Op::SliceAxis { input: a.id, axis, start }))
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes.borrow()[a.id].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), self.requires(&[a.id]), Op::SumAll(a.id)))
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            if t.is_empty() {
                shape_err!("mean_all", "empty tensor");
            }
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        };
        Ok(self.push(value, self.requires(&[a.id]), Op::MeanAll(a.id)))
    }

    fn reduce_axis_checked(&self, op: &'static str, a: Var, axis: usize) -> Result<(AxisGeom, Vec<usize>)> {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.id].value;
        if axis >= t.rank() || t.shape()[axis] == 0 {
            shape_err!(op, "axis {axis} invalid for shape {:?}", t.shape());
        }
        let geom = axis_geom(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok((geom, shape))
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let (geom, shape) = self.reduce_axis_checked("sum_axis", a, axis)?;
        let value = {
            let nodes = self.nodes.borrow();
            let data = reduce_axis(nodes[a.id].value.data(), &geom, |acc, x, _| acc + x, 0.0);
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, self.requires(&[a.id]), Op::SumAxis { input: a.id, axis }))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let (geom, shape) = self.reduce_axis_checked("mean_axis", a, axis)?;
        let n = geom.axis_len as f64;
        let value = {
            let nodes = self.nodes.borrow();
            let mut data = reduce_axis(nodes[a.id].value.data(), &geom, |acc, x, _| acc + x, 0.0);
            for v in &mut data {
                *v /= n;
            }
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, self.requires(&[a.id]), Op::MeanAxis { input: a.id, axis }))
    }

    /// Max over one axis. Ties route the gradient to the lowest index.
    pub fn max_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let (geom, shape) = self.reduce_axis_checked("max_axis", a, axis)?;
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let data = nodes[a.id].value.data();
            let slots = geom.outer * geom.inner;
            let mut out = vec![f64::NEG_INFINITY; slots];
            let mut arg = vec![0usize; slots];
            for o in 0..geom.outer {
                for k in 0..geom.axis_len {
                    for i in 0..geom.inner {
                        let v = data[(o * geom.axis_len + k) * geom.inner + i];
                        let slot = o * geom.inner + i;
                        if v > out[slot] {
                            out[slot] = v;
                            arg[slot] = k;
                        }
                    }
                }
            }
            (Tensor::new(shape, out)?, arg)
        };
        Ok(self.push(value, self.requires(&[a.id]), Op::MaxAxis { input: a.id, axis, argmax }))
    }

    // ---- rows / broadcast ----

    /// `x` of shape `[..., D]` plus a row vector of shape `[D]`.
    pub fn broadcast_add_row(&self, x: Var, row: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tr) = (&nodes[x.id].value, &nodes[row.id].value);
            let d = *tx.shape().last().unwrap_or(&0);
            if tr.shape() != [d] || d == 0 {
                shape_err!("broadcast_add_row", "{:?} + {:?}", tx.shape(), tr.shape());
            }
            let mut data = tx.data().to_vec();
            for (i, v) in data.iter_mut().enumerate() {
                *v += tr.data()[i % d];
            }
            Tensor::new(tx.shape().to_vec(), data)?
        };
        Ok(self.push(
            value,
            self.requires(&[x.id, row.id]),
            Op::BroadcastAddRow { input: x.id, row: row.id },
        ))
    }

    /// Multiplies `x` of shape `[..., D]` by per-prefix weights of shape `[...]`,
    /// expanding the weights over the last axis.
    pub fn mul_expand_last(&self, x: Var, weights: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.id].value, &nodes[weights.id].value);
            if tx.rank() == 0 || tw.shape() != &tx.shape()[..tx.rank() - 1] {
                shape_err!("mul_expand_last", "{:?} * {:?}", tx.shape(), tw.shape());
            }
            let d = tx.shape()[tx.rank() - 1];
            let mut data = tx.data().to_vec();
            for (i, v) in data.iter_mut().enumerate() {
                *v *= tw.data()[i / d];
            }
            Tensor::new(tx.shape().to_vec(), data)?
        };
        Ok(self.push(
            value,
            self.requires(&[x.id, weights.id]),
            Op::MulExpandLast { input: x.id, weights: weights.id },
        ))
    }

    // ---- normalization ----

    pub fn softmax_last(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            let d = *t.shape().last().unwrap_or(&0);
            if d == 0 {
                shape_err!("softmax_last", "shape {:?}", t.shape());
            }
            Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), d))?
        };
        Ok(self.push(value, self.requires(&[a.id]), Op::SoftmaxLast(a.id)))
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.id].value, &nodes[gamma.id].value, &nodes[beta.id].value);
            let d = *tx.shape().last().unwrap_or(&0);
            if d == 0 || tg.shape() != [d] || tb.shape() != [d] {
                shape_err!("layer_norm", "x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape());
            }
            let rows = tx.len() / d;
            let mut xhat = vec![0.0; tx.len()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; tx.len()];
            for r in 0..rows {
                let row = &tx.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for c in 0..d {
                    let h = (row[c] - mean) * inv;
                    xhat[r * d + c] = h;
                    out[r * d + c] = h * tg.data()[c] + tb.data()[c];
                }
            }
            (Tensor::new(tx.shape().to_vec(), out)?, xhat, inv_std)
        };
        Ok(self.push(
            value,
            self.requires(&[x.id, gamma.id, beta.id]),
            Op::LayerNorm { input: x.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
        ))
    }

    /// Batch normalization that normalizes with externally supplied running
    /// statistics; only the affine parameters receive gradients through the
    /// statistics-free path.
    pub fn batch_norm_affine(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let (value, mean, inv_std) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.id].value, &nodes[gamma.id].value, &nodes[beta.id].value);
            let d = *tx.shape().last().unwrap_or(&0);
            if d == 0
                || tg.shape() != [d]
                || tb.shape() != [d]
                || running_mean.shape() != [d]
                || running_var.shape() != [d]
            {
                shape_err!("batch_norm_affine", "x {:?}, stats dim {d}", tx.shape());
            }
            let inv: Vec<f64> = running_var.data().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            let mut out = vec![0.0; tx.len()];
            for (i, v) in tx.data().iter().enumerate() {
                let c = i % d;
                out[i] = (v - running_mean.data()[c]) * inv[c] * tg.data()[c] + tb.data()[c];
            }
            (
                Tensor::new(tx.shape().to_vec(), out)?,
                running_mean.data().to_vec(),
                inv,
            )
        };
        Ok(self.push(
            value,
            self.requires(&[x.id, gamma.id, beta.id]),
            Op::BatchNormAffine { input: x.id, gamma: gamma.id, beta: beta.id, mean, inv_std },
        ))
    }

    /// Normalizes the whole tensor to unit Euclidean norm.
    pub fn l2_normalize(&self, a: Var) -> Result<Var> {
        let (value, norm) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            let norm = t.l2_norm();
            if norm < 1e-30 {
                shape_err!("l2_normalize", "input has vanishing norm {norm}");
            }
            (t.map(|v| v / norm), norm)
        };
        Ok(self.push(value, self.requires(&[a.id]), Op::L2Normalize { input: a.id, norm }))
    }

    // ---- convolution stack ----

    /// 3x3 / 1x1 style convolution with stride 1 and zero "same" padding.
    /// Input `[C_in, H, W]`, weight `[C_out, C_in, kh, kw]` (odd kernels), bias `[C_out]`.
    pub fn conv2d_same(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tw, tb) = (&nodes[x.id].value, &nodes[weight.id].value, &nodes[bias.id].value);
            if tx.rank() != 3 || tw.rank() != 4 {
                shape_err!("conv2d_same", "x {:?}, w {:?}", tx.shape(), tw.shape());
            }
            let (cin, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (cout, wcin, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
            if wcin != cin || kh % 2 == 0 || kw % 2 == 0 || tb.shape() != [cout] {
                shape_err!("conv2d_same", "x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape());
            }
            let data = conv2d_same_forward(tx.data(), cin, h, w, tw.data(), cout, kh, kw, tb.data());
            Tensor::new(vec![cout, h, w], data)?
        };
        Ok(self.push(
            value,
            self.requires(&[x.id, weight.id, bias.id]),
            Op::Conv2dSame { input: x.id, weight: weight.id, bias: bias.id },
        ))
    }

    /// 2x2 max pooling with stride 2 and ceil-mode output sizes; boundary
    /// windows shrink instead of padding. Ties route to the lowest index.
    pub fn max_pool2x2(&self, x: Var) -> Result<Var> {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.rank() != 3 {
                shape_err!("max_pool2x2", "expected [C,H,W], got {:?}", t.shape());
            }
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let (data, arg, oh, ow) = maxpool2_forward(t.data(), c, h, w);
            (Tensor::new(vec![c, oh, ow], data)?, arg)
        };
        Ok(self.push(value, self.requires(&[x.id]), Op::MaxPool2x2 { input: x.id, argmax }))
    }

    /// Pads a rank-2 matrix with edge-inclusive mirror values:
    /// `pads = [top, bottom, left, right]`.
    pub fn pad_symmetric2d(&self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.id].value;
            if t.rank() != 2 {
                shape_err!("pad_symmetric2d", "expected [H,W], got {:?}", t.shape());
            }
            let (h, w) = (t.shape()[0], t.shape()[1]);
            let (oh, ow) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
            let mut data = vec![0.0; oh * ow];
            for i in 0..oh {
                let si = fold_symmetric(i as isize - pads[0] as isize, h);
                for j in 0..ow {
                    let sj = fold_symmetric(j as isize - pads[2] as isize, w);
                    data[i * ow + j] = t.data()[si * w + sj];
                }
            }
            Tensor::new(vec![oh, ow], data)?
        };
        Ok(self.push(value, self.requires(&[x.id]), Op::PadSymmetric2d { input: x.id, pads }))
    }

    // ---- aggregation / losses ----

    /// NetVLAD residual aggregation: `assign [N,K]`, `x [N,D]`, `centers [K,D]`
    /// producing `V[k,d] = sum_i assign[i,k] * (x[i,d] - centers[k,d])`.
    ///
    /// The per-slot contributions are summed in a value-canonical order so the
    /// result is invariant to any permutation of the rows of `x`/`assign`.
    pub fn netvlad_aggregate(&self, assign: Var, x: Var, centers: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tx, tc) = (&nodes[assign.id].value, &nodes[x.id].value, &nodes[centers.id].value);
            if ta.rank() != 2 || tx.rank() != 2 || tc.rank() != 2 {
                shape_err!("netvlad_aggregate", "assign {:?}, x {:?}, centers {:?}", ta.shape(), tx.shape(), tc.shape());
            }
            let (n, k) = (ta.shape()[0], ta.shape()[1]);
            let d = tx.shape()[1];
            if tx.shape()[0] != n || tc.shape() != [k, d] {
                shape_err!("netvlad_aggregate", "assign {:?}, x {:?}, centers {:?}", ta.shape(), tx.shape(), tc.shape());
            }
            let mut out = vec![0.0; k * d];
            let mut contrib = vec![0.0f64; n];
            for kk in 0..k {
                for dd in 0..d {
                    for i in 0..n {
                        contrib[i] = ta.data()[i * k + kk] * (tx.data()[i * d + dd] - tc.data()[kk * d + dd]);
                    }
                    contrib.sort_by(|a, b| a.total_cmp(b));
                    out[kk * d + dd] = contrib.iter().sum();
                }
            }
            Tensor::new(vec![k, d], out)?
        };
        Ok(self.push(
            value,
            self.requires(&[assign.id, x.id, centers.id]),
            Op::NetVladAggregate { assign: assign.id, input: x.id, centers: centers.id },
        ))
    }

    /// Mean binary cross-entropy over a vector of logits, computed in the
    /// numerically stable log-sum-exp form. Targets are constants.
    pub fn bce_with_logits_mean(&self, logits: Var, targets: &Tensor) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.id].value;
            if t.len() != targets.len() || t.is_empty() {
                shape_err!("bce_with_logits_mean", "logits {:?} vs targets {:?}", t.shape(), targets.shape());
            }
            let mut total = 0.0;
            for (&o, &y) in t.data().iter().zip(targets.data()) {
                total += o.max(0.0) - o * y + (1.0 + (-o.abs()).exp()).ln();
            }
            Tensor::scalar(total / t.len() as f64)
        };
        Ok(self.push(
            value,
            self.requires(&[logits.id]),
            Op::BceWithLogitsMean { logits: logits.id, targets: targets.data().to_vec() },
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar output.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = {
            let nodes = self.nodes.borrow();
            let node = nodes.get(root.id).ok_or(AutodiffError::UnknownValue(root.id))?;
            node.value.shape().to_vec()
        };
        if num_elements(&shape) != 1 {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        self.backward_seeded(root, &Tensor::new(shape, vec![1.0])?)
    }

    /// Reverse pass seeding the output gradient explicitly.
    pub fn backward_seeded(&self, root: Var, seed: &Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let node = nodes.get(root.id).ok_or(AutodiffError::UnknownValue(root.id))?;
        if node.value.shape() != seed.shape() {
            return Err(AutodiffError::SeedShapeMismatch {
                seed: seed.shape().to_vec(),
                output: node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(seed.data().to_vec());

        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &gout, &mut grads);
            // Leaves keep their accumulated gradient.
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout);
            }
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(data) if nodes[i].requires_grad => {
                    Some(Tensor::new(nodes[i].value.shape().to_vec(), data).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, add: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    add(buf);
}

#[allow(clippy::too_many_lines)]
fn backprop_node(nodes: &[Node], id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let wants = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.data();
    let len = |i: usize| nodes[i].value.len();

    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &p in &[*a, *b] {
                if wants(p) {
                    accumulate(&mut grads[p], len(p), |g| {
                        for (gv, &go) in g.iter_mut().zip(gout) {
                            *gv += go;
                        }
                    });
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[*a], len(*a), |g| {
                    for (gv, &go) in g.iter_mut().zip(gout) {
                        *gv += go;
                    }
                });
            }
            if wants(*b) {
                accumulate(&mut grads[*b], len(*b), |g| {
                    for (gv, &go) in g.iter_mut().zip(gout) {
                        *gv -= go;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let vb = val(*b);
                accumulate(&mut grads[*a], len(*a), |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * vb[i];
                    }
                });
            }
            if wants(*b) {
                let va = val(*a);
                accumulate(&mut grads[*b], len(*b), |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * va[i];
                    }
                });
            }
        }
        Op::Scale(a, c) => {
            if wants(*a) {
                accumulate(&mut grads[*a], len(*a), |g| {
                    for (gv, &go) in g.iter_mut().zip(gout) {
                        *gv += go * c;
                    }
                });
            }
        }
        Op::AddScalar(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], len(*a), |g| {
                    for (gv, &go) in g.iter_mut().zip(gout) {
                        *gv += go;
                    }
                });
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if wants(*a) {
                let ga = matmul_nt(gout, val(*b), m, n, k);
                accumulate(&mut grads[*a], len(*a), |g| {
                    for i in 0..g.len() {
                        g[i] += ga[i];
                    }
                });
            }
            if wants(*b) {
                let gb = matmul_tn(val(*a), gout, k, m, n);
                accumulate(&mut grads[*b], len(*b), |g| {
                    for i in 0..g.len() {
                        g[i] += gb[i];
                    }
                });
            }
        }
        Op::Permute { input, axes } => {
            if wants(*input) {
                let out_shape = nodes[id].value.shape();
                let inv = inverse_permutation(axes);
                let (gin, _) = permute_forward(gout, out_shape, &inv);
                accumulate(&mut grads[*input], len(*input), |g| {
                    for i in 0..g.len() {
                        g[i] += gin[i];
                    }
                });
            }
        }
        Op::Reshape { input } => {
            if wants(*input) {
                accumulate(&mut grads[*input], len(*input), |g| {
                    for (gv, &go) in g.iter_mut().zip(gout) {
                        *gv += go;
                    }
                });
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = nodes[id].value.shape();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            let out_step = out_shape[*axis] * inner;
            let mut offset = 0usize;
            for &p in inputs {
                let step = nodes[p].value.shape()[*axis] * inner;
                if wants(p) {
                    accumulate(&mut grads[p], len(p), |g| {
                        for o in 0..outer {
                            for t in 0..step {
                                g[o * step + t] += gout[o * out_step + offset + t];
                            }
                        }
                    });
                }
                offset += step;
            }
        }
        Op::SliceAxis { input, axis, start } => {
            if wants(*input) {
                let in_shape = nodes[*input].value.shape().to_vec();
                let out_shape = nodes[id].value.shape();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let in_step = in_shape[*axis] * inner;
                let out_step = out_shape[*axis] * inner;
                accumulate(&mut grads[*input], len(*input), |g| {
                    for o in 0..outer {
                        for t in 0..out_step {
                            g[o * in_step + start * inner + t] += gout[o * out_step + t];
                        }
                    }
                });
            }
        }
        Op::SumAll(a) => {
            if wants(*a) {
                let go = gout[0];
                accumulate(&mut grads[*a], len(*a), |g| {
                    for gv in g.iter_mut() {
                        *gv += go;
                    }
                });
            }
        }
        Op::MeanAll(a) => {
            if wants(*a) {
                let go = gout[0] / len(*a) as f64;
                accumulate(&mut grads[*a], len(*a), |g| {
                    for gv in g.iter_mut() {
                        *gv += go;
                    }
                });
            }
        }
        Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
            if wants(*input) {
                let geom = axis_geom(nodes[*input].value.shape(), *axis);
                let scale = if matches!(nodes[id].op, Op::MeanAxis { .. }) {
                    1.0 / geom.axis_len as f64
                } else {
                    1.0
                };
                accumulate(&mut grads[*input], len(*input), |g| {
                    for o in 0..geom.outer {
                        for k in 0..geom.axis_len {
                            for i in 0..geom.inner {
                                g[(o * geom.axis_len + k) * geom.inner + i] +=
                                    gout[o * geom.inner + i] * scale;
                            }
                        }
                    }
                });
            }
        }
        Op::MaxAxis { input, axis, argmax } => {
            if wants(*input) {
                let geom = axis_geom(nodes[*input].value.shape(), *axis);
                accumulate(&mut grads[*input], len(*input), |g| {
                    for o in 0..geom.outer {
                        for i in 0..geom.inner {
                            let slot = o * geom.inner + i;
                            g[(o * geom.axis_len + argmax[slot]) * geom.inner + i] += gout[slot];
                        }
                    }
                });
            }
        }
        Op::Relu(a) => {
            if wants(*a) {
                let x = val(*a);
                accumulate(&mut grads[*a], len(*a), |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
        }
        Op::Tanh(a) => {
            if wants(*a) {
                let y = nodes[id].value.data();
                accumulate(&mut grads[*a], len(*a), |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
        }
        Op::Sigmoid(a) => {
            if wants(*a) {
                let y = nodes[id].value.data();
                accumulate(&mut grads[*a], len(*a), |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
        }
        Op::Htanh(a) => {
            if wants(*a) {
                let x = val(*a);
                accumulate(&mut grads[*a], len(*a), |g| {
                    for i in 0..g.len() {
                        if x[i].abs() < 1.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
        }
        Op::Erf(a) => {
            if wants(*a) {
                let x = val(*a);
                let c = 2.0 / std::f64::consts::PI.sqrt();
                accumulate(&mut grads[*a], len(*a), |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * c * (-x[i] * x[i]).exp();
                    }
                });
            }
        }
        Op::Abs(a) => {
            if wants(*a) {
                let x = val(*a);
                accumulate(&mut grads[*a], len(*a), |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
        }
        Op::SoftmaxLast(a) => {
            if wants(*a) {
                let y = nodes[id].value.data();
                let d = *nodes[id].value.shape().last().unwrap();
                accumulate(&mut grads[*a], len(*a), |g| {
                    for r in 0..y.len() / d {
                        let base = r * d;
                        let dot: f64 = (0..d).map(|c| gout[base + c] * y[base + c]).sum();
                        for c in 0..d {
                            g[base + c] += y[base + c] * (gout[base + c] - dot);
                        }
                    }
                });
            }
        }
        Op::LayerNorm { input, gamma, beta, xhat, inv_std } => {
            let d = *nodes[id].value.shape().last().unwrap();
            let rows = nodes[id].value.len() / d;
            let gm = val(*gamma);
            if wants(*gamma) {
                accumulate(&mut grads[*gamma], len(*gamma), |g| {
                    for r in 0..rows {
                        for c in 0..d {
                            g[c] += gout[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
            }
            if wants(*beta) {
                accumulate(&mut grads[*beta], len(*beta), |g| {
                    for r in 0..rows {
                        for c in 0..d {
                            g[c] += gout[r * d + c];
                        }
                    }
                });
            }
            if wants(*input) {
                accumulate(&mut grads[*input], len(*input), |g| {
                    for r in 0..rows {
                        let base = r * d;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_xhat = 0.0;
                        for c in 0..d {
                            let dh = gout[base + c] * gm[c];
                            sum_dh += dh;
                            sum_dh_xhat += dh * xhat[base + c];
                        }
                        let m1 = sum_dh / d as f64;
                        let m2 = sum_dh_xhat / d as f64;
                        for c in 0..d {
                            let dh = gout[base + c] * gm[c];
                            g[base + c] += (dh - m1 - xhat[base + c] * m2) * inv_std[r];
                        }
                    }
                });
            }
        }
        Op::BatchNormAffine { input, gamma, beta, mean, inv_std } => {
            let d = mean.len();
            let x = val(*input);
            let gm = val(*gamma);
            if wants(*gamma) {
                accumulate(&mut grads[*gamma], len(*gamma), |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        let c = i % d;
                        g[c] += go * (x[i] - mean[c]) * inv_std[c];
                    }
                });
            }
            if wants(*beta) {
                accumulate(&mut grads[*beta], len(*beta), |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i % d] += go;
                    }
                });
            }
            if wants(*input) {
                accumulate(&mut grads[*input], len(*input), |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        let c = i % d;
                        g[i] += go * gm[c] * inv_std[c];
                    }
                });
            }
        }
        Op::Conv2dSame { input, weight, bias } => {
            let sx = nodes[*input].value.shape();
            let sw = nodes[*weight].value.shape();
            let (cin, h, w) = (sx[0], sx[1], sx[2]);
            let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
            let (gx, gw, gb) = conv2d_same_backward(
                val(*input),
                cin,
                h,
                w,
                val(*weight),
                cout,
                kh,
                kw,
                gout,
                wants(*input),
                wants(*weight),
                wants(*bias),
            );
            if wants(*input) {
                accumulate(&mut grads[*input], len(*input), |g| {
                    for i in 0..g.len() {
                        g[i] += gx[i];
                    }
                });
            }
            if wants(*weight) {
                accumulate(&mut grads[*weight], len(*weight), |g| {
                    for i in 0..g.len() {
                        g[i] += gw[i];
                    }
                });
            }
            if wants(*bias) {
                accumulate(&mut grads[*bias], len(*bias), |g| {
                    for i in 0..g.len() {
                        g[i] += gb[i];
                    }
                });
            }
        }
        Op::MaxPool2x2 { input, argmax } => {
            if wants(*input) {
                accumulate(&mut grads[*input], len(*input), |g| {
                    for (slot, &src) in argmax.iter().enumerate() {
                        g[src] += gout[slot];
                    }
                });
            }
        }
        Op::PadSymmetric2d { input, pads } => {
            if wants(*input) {
                let s = nodes[*input].value.shape();
                let (h, w) = (s[0], s[1]);
                let ow = w + pads[2] + pads[3];
                let oh = h + pads[0] + pads[1];
                accumulate(&mut grads[*input], len(*input), |g| {
                    for i in 0..oh {
                        let si = fold_symmetric(i as isize - pads[0] as isize, h);
                        for j in 0..ow {
                            let sj = fold_symmetric(j as isize - pads[2] as isize, w);
                            g[si * w + sj] += gout[i * ow + j];
                        }
                    }
                });
            }
        }
        Op::BroadcastAddRow { input, row } => {
            let d = nodes[*row].value.len();
            if wants(*input) {
                accumulate(&mut grads[*input], len(*input), |g| {
                    for (gv, &go) in g.iter_mut().zip(gout) {
                        *gv += go;
                    }
                });
            }
            if wants(*row) {
                accumulate(&mut grads[*row], len(*row), |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i % d] += go;
                    }
                });
            }
        }
        Op::MulExpandLast { input, weights } => {
            let d = *nodes[*input].value.shape().last().unwrap();
            if wants(*input) {
                let wv = val(*weights);
                accumulate(&mut grads[*input], len(*input), |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i] += go * wv[i / d];
                    }
                });
            }
            if wants(*weights) {
                let x = val(*input);
                accumulate(&mut grads[*weights], len(*weights), |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i / d] += go * x[i];
                    }
                });
            }
        }
        Op::L2Normalize { input, norm } => {
            if wants(*input) {
                let x = val(*input);
                let xg: f64 = x.iter().zip(gout).map(|(&xv, &gv)| xv * gv).sum();
                let n3 = norm * norm * norm;
                accumulate(&mut grads[*input], len(*input), |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / norm - x[i] * xg / n3;
                    }
                });
            }
        }
        Op::NetVladAggregate { assign, input, centers } => {
            let (n, k) = {
                let s = nodes[*assign].value.shape();
                (s[0], s[1])
            };
            let d = nodes[*input].value.shape()[1];
            let av = val(*assign);
            let xv = val(*input);
            let cv = val(*centers);
            if wants(*assign) {
                accumulate(&mut grads[*assign], len(*assign), |g| {
                    for i in 0..n {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for dd in 0..d {
                                s += gout[kk * d + dd] * (xv[i * d + dd] - cv[kk * d + dd]);
                            }
                            g[i * k + kk] += s;
                        }
                    }
                });
            }
            if wants(*input) {
                accumulate(&mut grads[*input], len(*input), |g| {
                    for i in 0..n {
                        for dd in 0..d {
                            let mut s = 0.0;
                            for kk in 0..k {
                                s += av[i * k + kk] * gout[kk * d + dd];
                            }
                            g[i * d + dd] += s;
                        }
                    }
                });
            }
            if wants(*centers) {
                accumulate(&mut grads[*centers], len(*centers), |g| {
                    for kk in 0..k {
                        let mass: f64 = (0..n).map(|i| av[i * k + kk]).sum();
                        for dd in 0..d {
                            g[kk * d + dd] -= gout[kk * d + dd] * mass;
                        }
                    }
                });
            }
        }
        Op::BceWithLogitsMean { logits, targets } => {
            if wants(*logits) {
                let o = val(*logits);
                let go = gout[0] / targets.len() as f64;
                accumulate(&mut grads[*logits], len(*logits), |g| {
                    for i in 0..g.len() {
                        let s = 1.0 / (1.0 + (-o[i]).exp());
                        g[i] += go * (s - targets[i]);
                    }
                });
            }
        }
    }
}

/// A graph builder used by the finite-difference oracle: it receives a fresh
/// tape plus the bound leaves and must return a scalar output.
pub type GraphFn<'a> = dyn Fn(&Tape, &BTreeMap<String, Var>) -> Result<Var> + 'a;

fn run_scalar(build: &GraphFn, leaves: &BTreeMap<String, Tensor>) -> Result<(Tape, BTreeMap<String, Var>, Var)> {
    let tape = Tape::new();
    let vars: BTreeMap<String, Var> = leaves
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
        .collect();
    let out = build(&tape, &vars)?;
    let shape = tape.shape_of(out);
    if num_elements(&shape) != 1 {
        return Err(AutodiffError::NonScalarOutput(shape));
    }
    Ok((tape, vars, out))
}

/// Compares the analytic gradient of `build`'s scalar output with central
/// finite differences on the leaf named `wrt`.
///
/// Returns the max over leaf entries of
/// `|analytic - central_difference| / max(|analytic|, 1e-12)`.
pub fn finite_difference_check(
    build: &GraphFn,
    leaves: &BTreeMap<String, Tensor>,
    wrt: &str,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(AutodiffError::InvalidStep(step));
    }
    let base = leaves.get(wrt).ok_or_else(|| AutodiffError::UnknownLeaf(wrt.to_string()))?;

    let (tape, vars, out) = run_scalar(build, leaves)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(vars[wrt])
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(base.shape().to_vec()));

    let mut max_err = 0.0f64;
    for e in 0..base.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut perturbed = leaves.clone();
            let t = perturbed.get_mut(wrt).unwrap();
            t.data_mut()[e] += delta;
            let (tape, _, out) = run_scalar(build, &perturbed)?;
            Ok(tape.value(out).item())
        };
        let fd = (eval(step)? - eval(-step)?) / (2.0 * step);
        let a = analytic.data()[e];
        let err = (a - fd).abs() / a.abs().max(1e-12);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
