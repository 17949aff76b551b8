//! Selector MLP: two fully connected layers over the 3-feature routing input
//! `[coarse similarity, self-sim(query), self-sim(target)]` with batch
//! normalization, ReLU, and train-only dropout on the hidden layer.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use super::{fetch, xavier, ModelResult, ParamBindings, TapeResult};
use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

pub const SELECTOR_INPUT_DIM: usize = 3;
pub const SELECTOR_HIDDEN: usize = 100;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct SelectorMlp {
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    /// Running statistics; frozen at inference, updated outside the graph
    /// during training.
    pub bn_mean: Tensor,
    pub bn_var: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

pub struct SelectorMlpVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl SelectorMlp {
    pub fn init(hidden: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            fc1_w: xavier(vec![SELECTOR_INPUT_DIM, hidden], SELECTOR_INPUT_DIM, hidden, rng),
            fc1_b: Tensor::zeros(vec![hidden]),
            bn_gamma: Tensor::filled(vec![hidden], 1.0),
            bn_beta: Tensor::zeros(vec![hidden]),
            bn_mean: Tensor::zeros(vec![hidden]),
            bn_var: Tensor::filled(vec![hidden], 1.0),
            fc2_w: Tensor::zeros(vec![hidden, 1]),
            fc2_b: Tensor::zeros(vec![1]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fc1_w.shape()[1]
    }

    pub fn frozen(&self, tape: &Tape) -> SelectorMlpVars {
        SelectorMlpVars {
            fc1_w: tape.constant(self.fc1_w.clone()),
            fc1_b: tape.constant(self.fc1_b.clone()),
            bn_gamma: tape.constant(self.bn_gamma.clone()),
            bn_beta: tape.constant(self.bn_beta.clone()),
            fc2_w: tape.constant(self.fc2_w.clone()),
            fc2_b: tape.constant(self.fc2_b.clone()),
        }
    }

    pub fn trainable(&self, tape: &Tape, reg: &mut ParamBindings, prefix: &str) -> SelectorMlpVars {
        SelectorMlpVars {
            fc1_w: reg.bind(tape, format!("{prefix}.fc1_w"), &self.fc1_w),
            fc1_b: reg.bind(tape, format!("{prefix}.fc1_b"), &self.fc1_b),
            bn_gamma: reg.bind(tape, format!("{prefix}.bn_gamma"), &self.bn_gamma),
            bn_beta: reg.bind(tape, format!("{prefix}.bn_beta"), &self.bn_beta),
            fc2_w: reg.bind(tape, format!("{prefix}.fc2_w"), &self.fc2_w),
            fc2_b: reg.bind(tape, format!("{prefix}.fc2_b"), &self.fc2_b),
        }
    }

    /// Pre-activation hidden features, used for the running-stat update.
    pub fn hidden_preact(&self, z: &[f64]) -> Vec<f64> {
        let h = self.hidden();
        let mut out = self.fc1_b.data().to_vec();
        for (i, &x) in z.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(&self.fc1_w.data()[i * h..(i + 1) * h]) {
                *o += x * w;
            }
        }
        out
    }

    /// Updates running batch-norm statistics from a batch of pre-activations.
    pub fn update_running_stats(&mut self, preacts: &[Vec<f64>]) {
        if preacts.is_empty() {
            return;
        }
        let h = self.hidden();
        let n = preacts.len() as f64;
        let mut mean = vec![0.0; h];
        for p in preacts {
            for (m, &v) in mean.iter_mut().zip(p) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; h];
        for p in preacts {
            for ((v, &x), &m) in var.iter_mut().zip(p).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        for j in 0..h {
            let rm = self.bn_mean.data()[j];
            let rv = self.bn_var.data()[j];
            self.bn_mean.data_mut()[j] = (1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean[j];
            self.bn_var.data_mut()[j] = (1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * var[j];
        }
    }

    /// Inference-mode confidence in (0, 1) for one routing input.
    pub fn confidence(&self, z: &[f64; 3]) -> f64 {
        let pre = self.hidden_preact(z);
        let h = self.hidden();
        let mut logit = self.fc2_b.data()[0];
        for j in 0..h {
            let inv = 1.0 / (self.bn_var.data()[j] + BN_EPS).sqrt();
            let normed = (pre[j] - self.bn_mean.data()[j]) * inv * self.bn_gamma.data()[j]
                + self.bn_beta.data()[j];
            let act = normed.max(0.0);
            logit += act * self.fc2_w.data()[j];
        }
        1.0 / (1.0 + (-logit).exp())
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.fc1_w"), self.fc1_w.clone()),
            (format!("{prefix}.fc1_b"), self.fc1_b.clone()),
            (format!("{prefix}.bn_gamma"), self.bn_gamma.clone()),
            (format!("{prefix}.bn_beta"), self.bn_beta.clone()),
            (format!("{prefix}.bn_mean"), self.bn_mean.clone()),
            (format!("{prefix}.bn_var"), self.bn_var.clone()),
            (format!("{prefix}.fc2_w"), self.fc2_w.clone()),
            (format!("{prefix}.fc2_b"), self.fc2_b.clone()),
        ]
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>, prefix: &str, hidden: usize) -> ModelResult<Self> {
        Ok(Self {
            fc1_w: fetch(map, &format!("{prefix}.fc1_w"), &[SELECTOR_INPUT_DIM, hidden])?,
            fc1_b: fetch(map, &format!("{prefix}.fc1_b"), &[hidden])?,
            bn_gamma: fetch(map, &format!("{prefix}.bn_gamma"), &[hidden])?,
            bn_beta: fetch(map, &format!("{prefix}.bn_beta"), &[hidden])?,
            bn_mean: fetch(map, &format!("{prefix}.bn_mean"), &[hidden])?,
            bn_var: fetch(map, &format!("{prefix}.bn_var"), &[hidden])?,
            fc2_w: fetch(map, &format!("{prefix}.fc2_w"), &[hidden, 1])?,
            fc2_b: fetch(map, &format!("{prefix}.fc2_b"), &[1])?,
        })
    }
}

impl SelectorMlpVars {
    /// Logits for a batch `z: [B, 3]`. The dropout mask, when given, is a
    /// `[B, H]` tensor of `0` or `1/keep_prob` entries applied after ReLU.
    pub fn logits(
        &self,
        tape: &Tape,
        z: Var,
        bn_mean: &Tensor,
        bn_var: &Tensor,
        dropout_mask: Option<&Tensor>,
    ) -> TapeResult<Var> {
        let h = tape.broadcast_add_row(tape.matmul(z, self.fc1_w)?, self.fc1_b)?;
        let h = tape.batch_norm_affine(h, self.bn_gamma, self.bn_beta, bn_mean, bn_var, BN_EPS)?;
        let h = tape.relu(h);
        let h = match dropout_mask {
            Some(mask) => {
                let m = tape.constant(mask.clone());
                tape.mul(h, m)?
            }
            None => h,
        };
        let out = tape.broadcast_add_row(tape.matmul(h, self.fc2_w)?, self.fc2_b)?;
        let b = tape.shape_of(out)[0];
        Ok(tape.reshape(out, vec![b])?)
    }
}
