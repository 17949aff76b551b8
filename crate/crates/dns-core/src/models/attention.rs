//! Region-saliency weighting: the teacher's context-vector scheme and the
//! students' hidden-layer scheme.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use super::{fetch, xavier, ModelResult, ParamBindings, TapeResult};
use crate::autodiff::{Tape, Var};
use crate::features::RegionFeatureTensor;
use crate::tensor::{dot, rand_unit_vector, Tensor};

/// Dot-product attention against a unit-norm context vector; raw weights in
/// [-1, 1] are mapped to [0, 1] via `(w + 1) / 2` before scaling regions.
#[derive(Debug, Clone)]
pub struct L2Attention {
    pub context: Tensor,
}

pub struct L2AttentionVars {
    pub context: Var,
}

impl L2Attention {
    pub fn init(dim: usize, rng: &mut ChaCha20Rng) -> Self {
        Self { context: rand_unit_vector(dim, rng) }
    }

    pub fn dim(&self) -> usize {
        self.context.len()
    }

    /// Re-projects the context vector onto the unit sphere; call after each
    /// optimizer step to maintain the norm invariant.
    pub fn renormalize(&mut self) {
        crate::tensor::l2_normalize_slice(self.context.data_mut());
    }

    pub fn frozen(&self, tape: &Tape) -> L2AttentionVars {
        L2AttentionVars { context: tape.constant(self.context.clone()) }
    }

    pub fn trainable(&self, tape: &Tape, reg: &mut ParamBindings, prefix: &str) -> L2AttentionVars {
        L2AttentionVars { context: reg.bind(tape, format!("{prefix}.context"), &self.context) }
    }

    /// Weighted copy without a tape, for retrieval-time indexing.
    pub fn weigh_plain(&self, x: &RegionFeatureTensor) -> RegionFeatureTensor {
        let d = x.dim();
        let mut values = Vec::with_capacity(x.values().len());
        for f in 0..x.frames() {
            for r in 0..x.regions() {
                let region = x.region(f, r);
                let w = (dot(region, self.context.data()) + 1.0) / 2.0;
                values.extend(region.iter().map(|&v| v * w));
            }
        }
        RegionFeatureTensor::new(x.video_id(), x.frames(), x.regions(), d, values)
            .expect("same dims")
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![(format!("{prefix}.context"), self.context.clone())]
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![(format!("{prefix}.context"), &mut self.context)]
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>, prefix: &str, dim: usize) -> ModelResult<Self> {
        Ok(Self { context: fetch(map, &format!("{prefix}.context"), &[dim])? })
    }
}

impl L2AttentionVars {
    /// `x: [N, R, D]` -> weighted `[N, R, D]`.
    pub fn weigh(&self, tape: &Tape, x: Var) -> TapeResult<Var> {
        let raw = tape.contract_last(x, self.context)?;
        let half = tape.scale(raw, 0.5)?;
        let weights = tape.add_scalar(half, 0.5)?;
        Ok(tape.mul_expand_last(x, weights)?)
    }
}

/// Hidden-layer attention: `alpha = sig(<u, tanh(r W + b)>)`, weights strictly
/// inside (0, 1).
#[derive(Debug, Clone)]
pub struct HAttention {
    pub hidden_w: Tensor,
    pub hidden_b: Tensor,
    pub context: Tensor,
}

pub struct HAttentionVars {
    pub hidden_w: Var,
    pub hidden_b: Var,
    pub context: Var,
}

impl HAttention {
    pub fn init(dim: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            hidden_w: xavier(vec![dim, dim], dim, dim, rng),
            hidden_b: Tensor::zeros(vec![dim]),
            context: rand_unit_vector(dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.context.len()
    }

    pub fn frozen(&self, tape: &Tape) -> HAttentionVars {
        HAttentionVars {
            hidden_w: tape.constant(self.hidden_w.clone()),
            hidden_b: tape.constant(self.hidden_b.clone()),
            context: tape.constant(self.context.clone()),
        }
    }

    pub fn trainable(&self, tape: &Tape, reg: &mut ParamBindings, prefix: &str) -> HAttentionVars {
        HAttentionVars {
            hidden_w: reg.bind(tape, format!("{prefix}.hidden_w"), &self.hidden_w),
            hidden_b: reg.bind(tape, format!("{prefix}.hidden_b"), &self.hidden_b),
            context: reg.bind(tape, format!("{prefix}.context"), &self.context),
        }
    }

    pub fn weigh_plain(&self, x: &RegionFeatureTensor) -> RegionFeatureTensor {
        let d = x.dim();
        let mut values = Vec::with_capacity(x.values().len());
        let mut hidden = vec![0.0; d];
        for f in 0..x.frames() {
            for r in 0..x.regions() {
                let region = x.region(f, r);
                for j in 0..d {
                    let mut h = self.hidden_b.data()[j];
                    for (t, &v) in region.iter().enumerate() {
                        h += v * self.hidden_w.data()[t * d + j];
                    }
                    hidden[j] = h.tanh();
                }
                let logit = dot(&hidden, self.context.data());
                let alpha = 1.0 / (1.0 + (-logit).exp());
                values.extend(region.iter().map(|&v| v * alpha));
            }
        }
        RegionFeatureTensor::new(x.video_id(), x.frames(), x.regions(), d, values)
            .expect("same dims")
    }

    /// Attention weights only, one per region.
    pub fn weights_plain(&self, x: &RegionFeatureTensor) -> Vec<f64> {
        let d = x.dim();
        let mut out = Vec::with_capacity(x.frames() * x.regions());
        let mut hidden = vec![0.0; d];
        for f in 0..x.frames() {
            for r in 0..x.regions() {
                let region = x.region(f, r);
                for j in 0..d {
                    let mut h = self.hidden_b.data()[j];
                    for (t, &v) in region.iter().enumerate() {
                        h += v * self.hidden_w.data()[t * d + j];
                    }
                    hidden[j] = h.tanh();
                }
                let logit = dot(&hidden, self.context.data());
                out.push(1.0 / (1.0 + (-logit).exp()));
            }
        }
        out
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.hidden_w"), self.hidden_w.clone()),
            (format!("{prefix}.hidden_b"), self.hidden_b.clone()),
            (format!("{prefix}.context"), self.context.clone()),
        ]
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.hidden_w"), &mut self.hidden_w),
            (format!("{prefix}.hidden_b"), &mut self.hidden_b),
            (format!("{prefix}.context"), &mut self.context),
        ]
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>, prefix: &str, dim: usize) -> ModelResult<Self> {
        Ok(Self {
            hidden_w: fetch(map, &format!("{prefix}.hidden_w"), &[dim, dim])?,
            hidden_b: fetch(map, &format!("{prefix}.hidden_b"), &[dim])?,
            context: fetch(map, &format!("{prefix}.context"), &[dim])?,
        })
    }
}

impl HAttentionVars {
    /// `x: [N, R, D]` -> weighted `[N, R, D]`.
    pub fn weigh(&self, tape: &Tape, x: Var) -> TapeResult<Var> {
        let weights = self.weights(tape, x)?;
        Ok(tape.mul_expand_last(x, weights)?)
    }

    /// Attention weights `[N, R]` for an `[N, R, D]` input.
    pub fn weights(&self, tape: &Tape, x: Var) -> TapeResult<Var> {
        let shape = tape.shape_of(x);
        let (n, r, d) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(x, vec![n * r, d])?;
        let pre = tape.matmul(flat, self.hidden_w)?;
        let pre = tape.broadcast_add_row(pre, self.hidden_b)?;
        let hidden = tape.tanh(pre);
        let logits = tape.contract_last(hidden, self.context)?;
        let alpha = tape.sigmoid(logits);
        Ok(tape.reshape(alpha, vec![n, r])?)
    }
}
