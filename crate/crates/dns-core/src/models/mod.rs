//! Trainable blocks: attention schemes, the binarization layer, the video
//! comparator CNN, the coarse video embedder, the selector MLP, and the
//! teacher/student similarity assemblies built from them.

mod attention;
mod binarize;
pub mod checkpoint;
mod coarse;
mod comparator;
mod selector;
mod similarity;

pub use attention::{HAttention, HAttentionVars, L2Attention, L2AttentionVars};
pub use binarize::{Binarization, BinarizationVars, DEFAULT_SIGMA};
pub use coarse::{
    sinusoidal_encoding, CoarseConfig, CoarseStudent, CoarseStudentVars, NetVlad, NetVladVars,
    TransformerLayer, TransformerLayerVars,
};
pub use comparator::{Comparator, ComparatorConfig, ComparatorVars};
pub use selector::{SelectorMlp, SelectorMlpVars, SELECTOR_HIDDEN, SELECTOR_INPUT_DIM};
pub use similarity::{
    BinarizationStudent, FineAttentionStudent, FineStudent, SelfSimilarityHead, TeacherModel,
};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Tape, Var};

/// Result type for tape-composed forward passes.
pub type TapeResult<T> = std::result::Result<T, AutodiffError>;
use crate::features::FeatureError;
use crate::kernels::KernelError;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: missing tensor '{0}'")]
    MissingTensor(String),
    #[error("checkpoint: tensor '{name}' has shape {got:?}, expected {want:?}")]
    BadTensorShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("checkpoint: bad magic, expected DNSCKPT1")]
    BadMagic,
    #[error("checkpoint: truncated while reading {0}")]
    Truncated(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;

/// Names and tape handles of the parameters bound for one training step.
#[derive(Default)]
pub struct ParamBindings {
    entries: Vec<(String, Var)>,
}

impl ParamBindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds a parameter tensor as a gradient-tracked leaf.
    pub fn bind(&mut self, tape: &Tape, name: String, tensor: &Tensor) -> Var {
        let var = tape.leaf(tensor.clone().with_grad());
        self.entries.push((name, var));
        var
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    /// Extracts this step's gradients keyed by parameter name; parameters that
    /// did not participate are absent.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

fn fetch(map: &BTreeMap<String, Tensor>, name: &str, want: &[usize]) -> ModelResult<Tensor> {
    let t = map
        .get(name)
        .ok_or_else(|| ModelError::MissingTensor(name.to_string()))?;
    if t.shape() != want {
        return Err(ModelError::BadTensorShape {
            name: name.to_string(),
            got: t.shape().to_vec(),
            want: want.to_vec(),
        });
    }
    Ok(t.clone())
}

fn fetch_any(map: &BTreeMap<String, Tensor>, name: &str) -> ModelResult<Tensor> {
    map.get(name)
        .cloned()
        .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
}

fn fetch_scalar(map: &BTreeMap<String, Tensor>, name: &str) -> ModelResult<f64> {
    let t = fetch_any(map, name)?;
    if t.len() != 1 {
        return Err(ModelError::BadTensorShape {
            name: name.to_string(),
            got: t.shape().to_vec(),
            want: vec![1],
        });
    }
    Ok(t.data()[0])
}

/// Xavier/Glorot-scaled Gaussian init.
pub(crate) fn xavier(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut rand_chacha::ChaCha20Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    crate::tensor::randn(shape, std, rng)
}
