//! Video comparator: a small CNN refining a frame-to-frame similarity matrix
//! into temporally aware similarity patterns.
//!
//! Architecture: conv3x3 -> relu -> maxpool2x2 -> conv3x3 -> relu ->
//! maxpool2x2 -> conv3x3 -> relu -> conv1x1, all "same"-padded, so an
//! `N_q x N_p` input becomes `ceil(N_q/4) x ceil(N_p/4)`. Inputs smaller than
//! 4 frames are symmetric-padded to 4 first.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use super::{fetch_any, xavier, ModelError, ModelResult, ParamBindings, TapeResult};
use crate::autodiff::{Tape, Var};
use crate::kernels::SimilarityMatrix;
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComparatorConfig {
    pub channels: (usize, usize, usize),
}

impl Default for ComparatorConfig {
    fn default() -> Self {
        Self { channels: (32, 64, 128) }
    }
}

#[derive(Debug, Clone)]
pub struct Comparator {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub conv4_w: Tensor,
    pub conv4_b: Tensor,
}

pub struct ComparatorVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub conv3_w: Var,
    pub conv3_b: Var,
    pub conv4_w: Var,
    pub conv4_b: Var,
}

impl Comparator {
    pub fn init(cfg: ComparatorConfig, rng: &mut ChaCha20Rng) -> Self {
        let (c1, c2, c3) = cfg.channels;
        Self {
            conv1_w: xavier(vec![c1, 1, 3, 3], 9, c1 * 9, rng),
            conv1_b: Tensor::zeros(vec![c1]),
            conv2_w: xavier(vec![c2, c1, 3, 3], c1 * 9, c2 * 9, rng),
            conv2_b: Tensor::zeros(vec![c2]),
            conv3_w: xavier(vec![c3, c2, 3, 3], c2 * 9, c3 * 9, rng),
            conv3_b: Tensor::zeros(vec![c3]),
            conv4_w: xavier(vec![1, c3, 1, 1], c3, 1, rng),
            conv4_b: Tensor::zeros(vec![1]),
        }
    }

    /// Near-identity init: channel 0 carries the input straight through every
    /// layer (center taps set to 1) with small Gaussian noise elsewhere for
    /// symmetry breaking. With `noise = 0` the network computes an exact
    /// relu + double max-pool of its input.
    pub fn init_passthrough(cfg: ComparatorConfig, noise: f64, rng: &mut ChaCha20Rng) -> Self {
        let mut c = if noise > 0.0 {
            let mut c = Self::init(cfg, rng);
            for w in [&mut c.conv1_w, &mut c.conv2_w, &mut c.conv3_w, &mut c.conv4_w] {
                *w = w.map(|v| v * noise);
            }
            c
        } else {
            let (c1, c2, c3) = cfg.channels;
            Self {
                conv1_w: Tensor::zeros(vec![c1, 1, 3, 3]),
                conv1_b: Tensor::zeros(vec![c1]),
                conv2_w: Tensor::zeros(vec![c2, c1, 3, 3]),
                conv2_b: Tensor::zeros(vec![c2]),
                conv3_w: Tensor::zeros(vec![c3, c2, 3, 3]),
                conv3_b: Tensor::zeros(vec![c3]),
                conv4_w: Tensor::zeros(vec![1, c3, 1, 1]),
                conv4_b: Tensor::zeros(vec![1]),
            }
        };
        // Center tap of kernel [0, 0, .., ..] sits at linear index 4 for 3x3.
        c.conv1_w.data_mut()[4] = 1.0;
        c.conv2_w.data_mut()[4] = 1.0;
        c.conv3_w.data_mut()[4] = 1.0;
        c.conv4_w.data_mut()[0] = 1.0;
        c
    }

    pub fn config(&self) -> ComparatorConfig {
        ComparatorConfig {
            channels: (
                self.conv1_w.shape()[0],
                self.conv2_w.shape()[0],
                self.conv3_w.shape()[0],
            ),
        }
    }

    pub fn frozen(&self, tape: &Tape) -> ComparatorVars {
        ComparatorVars {
            conv1_w: tape.constant(self.conv1_w.clone()),
            conv1_b: tape.constant(self.conv1_b.clone()),
            conv2_w: tape.constant(self.conv2_w.clone()),
            conv2_b: tape.constant(self.conv2_b.clone()),
            conv3_w: tape.constant(self.conv3_w.clone()),
            conv3_b: tape.constant(self.conv3_b.clone()),
            conv4_w: tape.constant(self.conv4_w.clone()),
            conv4_b: tape.constant(self.conv4_b.clone()),
        }
    }

    pub fn trainable(&self, tape: &Tape, reg: &mut ParamBindings, prefix: &str) -> ComparatorVars {
        ComparatorVars {
            conv1_w: reg.bind(tape, format!("{prefix}.conv1_w"), &self.conv1_w),
            conv1_b: reg.bind(tape, format!("{prefix}.conv1_b"), &self.conv1_b),
            conv2_w: reg.bind(tape, format!("{prefix}.conv2_w"), &self.conv2_w),
            conv2_b: reg.bind(tape, format!("{prefix}.conv2_b"), &self.conv2_b),
            conv3_w: reg.bind(tape, format!("{prefix}.conv3_w"), &self.conv3_w),
            conv3_b: reg.bind(tape, format!("{prefix}.conv3_b"), &self.conv3_b),
            conv4_w: reg.bind(tape, format!("{prefix}.conv4_w"), &self.conv4_w),
            conv4_b: reg.bind(tape, format!("{prefix}.conv4_b"), &self.conv4_b),
        }
    }

    /// Refines a similarity matrix without gradient tracking.
    pub fn forward_plain(&self, m: &SimilarityMatrix) -> ModelResult<SimilarityMatrix> {
        let tape = Tape::new();
        let input = tape.constant(Tensor::new(
            vec![m.rows(), m.cols()],
            m.values().to_vec(),
        )?);
        let out = self.frozen(&tape).forward(&tape, input)?;
        let t = tape.value(out);
        Ok(SimilarityMatrix::new(t.shape()[0], t.shape()[1], t.into_data()))
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.conv1_w"), self.conv1_w.clone()),
            (format!("{prefix}.conv1_b"), self.conv1_b.clone()),
            (format!("{prefix}.conv2_w"), self.conv2_w.clone()),
            (format!("{prefix}.conv2_b"), self.conv2_b.clone()),
            (format!("{prefix}.conv3_w"), self.conv3_w.clone()),
            (format!("{prefix}.conv3_b"), self.conv3_b.clone()),
            (format!("{prefix}.conv4_w"), self.conv4_w.clone()),
            (format!("{prefix}.conv4_b"), self.conv4_b.clone()),
        ]
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>, prefix: &str) -> ModelResult<Self> {
        let get = |suffix: &str| fetch_any(map, &format!("{prefix}.{suffix}"));
        let c = Self {
            conv1_w: get("conv1_w")?,
            conv1_b: get("conv1_b")?,
            conv2_w: get("conv2_w")?,
            conv2_b: get("conv2_b")?,
            conv3_w: get("conv3_w")?,
            conv3_b: get("conv3_b")?,
            conv4_w: get("conv4_w")?,
            conv4_b: get("conv4_b")?,
        };
        if c.conv1_w.rank() != 4 || c.conv2_w.rank() != 4 || c.conv3_w.rank() != 4 || c.conv4_w.rank() != 4 {
            return Err(ModelError::InvalidConfig("comparator weights must be rank 4".into()));
        }
        Ok(c)
    }
}

impl ComparatorVars {
    /// `m: [H, W]` -> refined `[ceil(H/4), ceil(W/4)]` (after padding to 4).
    pub fn forward(&self, tape: &Tape, m: Var) -> TapeResult<Var> {
        let shape = tape.shape_of(m);
        let (h, w) = (shape[0], shape[1]);
        let m = if h < MIN_SIDE || w < MIN_SIDE {
            let (pt, pl) = (MIN_SIDE.saturating_sub(h) / 2, MIN_SIDE.saturating_sub(w) / 2);
            let (pb, pr) = (
                MIN_SIDE.saturating_sub(h) - pt,
                MIN_SIDE.saturating_sub(w) - pl,
            );
            tape.pad_symmetric2d(m, [pt, pb, pl, pr])?
        } else {
            m
        };
        let shape = tape.shape_of(m);
        let x = tape.reshape(m, vec![1, shape[0], shape[1]])?;

        let x = tape.conv2d_same(x, self.conv1_w, self.conv1_b)?;
        let x = tape.relu(x);
        let x = tape.max_pool2x2(x)?;
        let x = tape.conv2d_same(x, self.conv2_w, self.conv2_b)?;
        let x = tape.relu(x);
        let x = tape.max_pool2x2(x)?;
        let x = tape.conv2d_same(x, self.conv3_w, self.conv3_b)?;
        let x = tape.relu(x);
        let x = tape.conv2d_same(x, self.conv4_w, self.conv4_b)?;

        let out_shape = tape.shape_of(x);
        Ok(tape.reshape(x, vec![out_shape[1], out_shape[2]])?)
    }
}
