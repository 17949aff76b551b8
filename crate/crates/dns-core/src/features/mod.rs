//! Video representations and their persistence: region-level feature tensors,
//! bit-packed binary codes, PCA whitening, the three-representation index
//! format, and the synthetic corpus generator used at desk scale.

mod io;
mod pack;
pub mod synth;
mod whiten;

pub use io::{
    features_from_bytes, features_to_bytes, index_from_bytes, index_to_bytes, read_features,
    read_index, write_features, write_index,
};
pub use pack::{pack_codes, unpack_codes};
pub use synth::{generate_synthetic_corpus, CorpusParams, SyntheticCorpus};
pub use whiten::{fit_whitening, WhiteningTransform};

use thiserror::Error;

use crate::tensor::{l2_normalize_slice, Tensor};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid dimensions for '{id}': frames={frames}, regions={regions}, dim={dim}, values={values}")]
    InvalidDimensions {
        id: String,
        frames: usize,
        regions: usize,
        dim: usize,
        values: usize,
    },
    #[error("binary codes must be a [frames, regions, bits] tensor, got shape {0:?}")]
    BadCodeShape(Vec<usize>),
    #[error("non-binary entry {value} at (frame {frame}, region {region}, bit {bit})")]
    NonBinaryEntry {
        frame: usize,
        region: usize,
        bit: usize,
        value: f64,
    },
    #[error("whitening needs at least {needed} sample vectors of dim >= {out_dim}, got {got} of dim {dim}")]
    BadWhiteningSample {
        needed: usize,
        got: usize,
        dim: usize,
        out_dim: usize,
    },
    #[error("covariance is rank-deficient: eigenvalue {index} is {value:.3e}")]
    RankDeficient { index: usize, value: f64 },
    #[error("record '{id}': fine representation belongs to '{fine_id}'")]
    MismatchedIds { id: String, fine_id: String },
    #[error("record '{id}': self-similarity {self_sim} is not finite")]
    NonFiniteSelfSim { id: String, self_sim: f64 },
    #[error("record '{id}': coarse vector norm {norm} is not within 1e-4 of 1")]
    UnnormalizedCoarse { id: String, norm: f64 },
    #[error("bad magic: expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file while reading {0}")]
    Truncated(&'static str),
    #[error("duplicate video id '{0}'")]
    DuplicateId(String),
    #[error("empty record list")]
    EmptyRecords,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A region-level video tensor: `frames x regions x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureTensor {
    video_id: String,
    frames: usize,
    regions: usize,
    dim: usize,
    values: Vec<f64>,
}

impl RegionFeatureTensor {
    pub fn new(
        video_id: impl Into<String>,
        frames: usize,
        regions: usize,
        dim: usize,
        values: Vec<f64>,
    ) -> Result<Self, FeatureError> {
        let video_id = video_id.into();
        if frames == 0 || regions == 0 || dim == 0 || values.len() != frames * regions * dim {
            return Err(FeatureError::InvalidDimensions {
                id: video_id,
                frames,
                regions,
                dim,
                values: values.len(),
            });
        }
        Ok(Self { video_id, frames, regions, dim, values })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn region(&self, frame: usize, region: usize) -> &[f64] {
        let base = (frame * self.regions + region) * self.dim;
        &self.values[base..base + self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.regions, self.dim], self.values.clone())
            .expect("dimensions validated at construction")
    }

    pub fn from_tensor(video_id: impl Into<String>, t: &Tensor) -> Result<Self, FeatureError> {
        let id = video_id.into();
        if t.rank() != 3 {
            return Err(FeatureError::InvalidDimensions {
                id,
                frames: 0,
                regions: 0,
                dim: 0,
                values: t.len(),
            });
        }
        Self::new(id, t.shape()[0], t.shape()[1], t.shape()[2], t.data().to_vec())
    }

    /// New tensor whose frames are `indices` into this one, in order.
    /// Indices may repeat (slow motion) or skip (drops, fast forward).
    pub fn select_frames(&self, indices: &[usize]) -> Self {
        assert!(!indices.is_empty(), "cannot build a zero-frame video");
        let fsz = self.regions * self.dim;
        let mut values = Vec::with_capacity(indices.len() * fsz);
        for &i in indices {
            values.extend_from_slice(&self.values[i * fsz..(i + 1) * fsz]);
        }
        Self {
            video_id: self.video_id.clone(),
            frames: indices.len(),
            regions: self.regions,
            dim: self.dim,
            values,
        }
    }

    pub fn with_id(mut self, video_id: impl Into<String>) -> Self {
        self.video_id = video_id.into();
        self
    }

    /// Re-normalizes every region vector to unit length in place.
    pub fn normalize_regions(&mut self) {
        for chunk in self.values.chunks_mut(self.dim) {
            l2_normalize_slice(chunk);
        }
    }
}

/// Bit-packed binary region codes: one bit per code entry, each region vector
/// padded to whole 64-bit words. Bit `i` lives in word `i / 64` at position
/// `i % 64`; padding bits are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryCodeTensor {
    video_id: String,
    frames: usize,
    regions: usize,
    bits: usize,
    words_per_code: usize,
    words: Vec<u64>,
}

impl BinaryCodeTensor {
    pub(crate) fn from_raw(
        video_id: String,
        frames: usize,
        regions: usize,
        bits: usize,
        words: Vec<u64>,
    ) -> Self {
        let words_per_code = bits.div_ceil(64);
        debug_assert_eq!(words.len(), frames * regions * words_per_code);
        Self { video_id, frames, regions, bits, words_per_code, words }
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn code(&self, frame: usize, region: usize) -> &[u64] {
        let base = (frame * self.regions + region) * self.words_per_code;
        &self.words[base..base + self.words_per_code]
    }

    /// Serialized payload size per region vector.
    pub fn bytes_per_code(&self) -> usize {
        self.bits.div_ceil(8)
    }

    pub fn with_id(mut self, video_id: impl Into<String>) -> Self {
        self.video_id = video_id.into();
        self
    }
}

/// The fine-grained half of an index record: float tensors for attention
/// students, packed codes for the binarization student.
#[derive(Debug, Clone, PartialEq)]
pub enum FineRepresentation {
    Float(RegionFeatureTensor),
    Binary(BinaryCodeTensor),
}

impl FineRepresentation {
    pub fn video_id(&self) -> &str {
        match self {
            FineRepresentation::Float(t) => t.video_id(),
            FineRepresentation::Binary(b) => b.video_id(),
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            FineRepresentation::Float(t) => t.frames(),
            FineRepresentation::Binary(b) => b.frames(),
        }
    }
}

/// Per-video index bundle: fine representation, coarse global vector, and the
/// self-similarity scalar consumed by the selector.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoIndexRecord {
    pub video_id: String,
    pub fine: FineRepresentation,
    pub coarse: Vec<f64>,
    pub self_sim: f64,
}

impl VideoIndexRecord {
    pub fn new(
        fine: FineRepresentation,
        coarse: Vec<f64>,
        self_sim: f64,
    ) -> Result<Self, FeatureError> {
        let video_id = fine.video_id().to_string();
        if !self_sim.is_finite() {
            return Err(FeatureError::NonFiniteSelfSim { id: video_id, self_sim });
        }
        let norm = coarse.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(FeatureError::UnnormalizedCoarse { id: video_id, norm });
        }
        Ok(Self { video_id, fine, coarse, self_sim })
    }
}
