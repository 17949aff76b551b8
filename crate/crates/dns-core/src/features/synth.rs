//! Synthetic desk-scale corpus: anchor videos drawn from random low-dim
//! subspaces, near-duplicate positives derived by temporal edits plus noise,
//! and unrelated distractors. Ground-truth relevance records which videos
//! derive from which anchor.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::RegionFeatureTensor;
use crate::tensor::l2_normalize_slice;

#[derive(Debug, Clone)]
pub struct CorpusParams {
    /// Fraction of videos that act as anchors (at least one).
    pub anchor_fraction: f64,
    /// Fraction of videos derived from anchors by temporal edits.
    pub derived_fraction: f64,
    pub frames: (usize, usize),
    pub regions: usize,
    pub dim: usize,
    /// Latent dimensionality of each anchor's subspace.
    pub subspace_dim: usize,
    /// Per-anchor frame drift, sampled uniformly from this range. Low drift
    /// gives near-static videos, high drift gives temporally diverse ones.
    pub diversity: (f64, f64),
    /// Gaussian perturbation applied to each region vector of a derived video.
    pub noise_sigma: f64,
    /// In-frame spread of region vectors around the frame latent.
    pub region_jitter: f64,
    /// Probability that each temporal edit applies to a derived video.
    pub edit_drop: f64,
    pub edit_fast_forward: f64,
    pub edit_slow_motion: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            anchor_fraction: 0.2,
            derived_fraction: 0.4,
            frames: (8, 32),
            regions: 4,
            dim: 16,
            subspace_dim: 3,
            diversity: (0.05, 0.8),
            noise_sigma: 0.12,
            region_jitter: 0.35,
            edit_drop: 0.5,
            edit_fast_forward: 0.3,
            edit_slow_motion: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    /// Videos in generation order; region vectors are unit-norm.
    pub videos: Vec<RegionFeatureTensor>,
    /// Anchor id -> ids of videos derived from it.
    pub relevance: BTreeMap<String, BTreeSet<String>>,
    pub anchor_ids: Vec<String>,
}

impl SyntheticCorpus {
    pub fn video(&self, id: &str) -> Option<&RegionFeatureTensor> {
        self.videos.iter().find(|v| v.video_id() == id)
    }
}

/// Removes each frame with probability `per_frame`; the first frame is kept
/// if everything would be dropped.
pub(crate) fn frame_drop_indices(n: usize, per_frame: f64, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut kept: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() >= per_frame).collect();
    if kept.is_empty() {
        kept.push(0);
    }
    kept
}

/// Keeps every second frame starting from the first.
pub(crate) fn fast_forward_indices(n: usize) -> Vec<usize> {
    (0..n).step_by(2).collect()
}

/// Repeats every frame twice.
pub(crate) fn slow_motion_indices(n: usize) -> Vec<usize> {
    (0..n).flat_map(|i| [i, i]).collect()
}

pub(crate) fn orthonormal_rows(rows: usize, dim: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(&x, &y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= d * bi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

struct AnchorSource {
    basis: Vec<Vec<f64>>,
    diversity: f64,
}

fn generate_anchor_video(
    id: String,
    src: &AnchorSource,
    params: &CorpusParams,
    rng: &mut ChaCha20Rng,
) -> RegionFeatureTensor {
    let n = rng.random_range(params.frames.0..=params.frames.1);
    let s = params.subspace_dim;
    let mut latent: Vec<f64> = (0..s).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    l2_normalize_slice(&mut latent);

    let mut values = Vec::with_capacity(n * params.regions * params.dim);
    for _ in 0..n {
        let mut frame_center = vec![0.0; params.dim];
        for (k, &z) in latent.iter().enumerate() {
            for (c, &b) in frame_center.iter_mut().zip(&src.basis[k]) {
                *c += z * b;
            }
        }
        for _ in 0..params.regions {
            let mut region: Vec<f64> = frame_center
                .iter()
                .map(|&c| c + params.region_jitter * rng.sample::<f64, _>(StandardNormal))
                .collect();
            l2_normalize_slice(&mut region);
            values.extend_from_slice(&region);
        }
        for z in latent.iter_mut() {
            *z += src.diversity * rng.sample::<f64, _>(StandardNormal);
        }
        l2_normalize_slice(&mut latent);
    }
    RegionFeatureTensor::new(id, n, params.regions, params.dim, values)
        .expect("generator emits valid dims")
}

fn derive_positive(
    id: String,
    anchor: &RegionFeatureTensor,
    params: &CorpusParams,
    rng: &mut ChaCha20Rng,
) -> RegionFeatureTensor {
    let mut indices: Vec<usize> = (0..anchor.frames()).collect();
    if rng.random::<f64>() < params.edit_drop && anchor.frames() >= 2 {
        let kept = frame_drop_indices(indices.len(), 0.3, rng);
        indices = kept.into_iter().map(|i| indices[i]).collect();
    }
    if rng.random::<f64>() < params.edit_fast_forward && indices.len() >= 2 {
        indices = fast_forward_indices(indices.len()).into_iter().map(|i| indices[i]).collect();
    }
    if rng.random::<f64>() < params.edit_slow_motion {
        indices = slow_motion_indices(indices.len()).into_iter().map(|i| indices[i]).collect();
    }
    let mut derived = anchor.select_frames(&indices).with_id(id);
    if params.noise_sigma > 0.0 {
        let values = derived.to_tensor();
        let mut noisy = values.data().to_vec();
        for v in &mut noisy {
            *v += params.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let mut out = RegionFeatureTensor::new(
            derived.video_id(),
            derived.frames(),
            derived.regions(),
            derived.dim(),
            noisy,
        )
        .expect("same dims");
        out.normalize_regions();
        derived = out;
    }
    derived
}

/// Deterministic synthetic corpus with ground-truth relevance sets.
///
/// Panics if `n_videos < 2`; all other parameters are clamped to feasible
/// counts.
pub fn generate_synthetic_corpus(seed: u64, n_videos: usize, params: &CorpusParams) -> SyntheticCorpus {
    assert!(n_videos >= 2, "corpus needs at least two videos");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let n_anchors = ((n_videos as f64 * params.anchor_fraction).round() as usize)
        .clamp(1, n_videos - 1);
    let n_derived = ((n_videos as f64 * params.derived_fraction).round() as usize)
        .clamp(1, n_videos - n_anchors);
    let n_distractors = n_videos - n_anchors - n_derived;

    let width = n_videos.to_string().len().max(3);
    let make_id = |i: usize| format!("v{i:0w$}", w = width);

    let mut videos = Vec::with_capacity(n_videos);
    let mut relevance: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut anchor_ids = Vec::with_capacity(n_anchors);

    let mut next_id = 0usize;
    let mut sources = Vec::with_capacity(n_anchors);
    for _ in 0..n_anchors {
        let id = make_id(next_id);
        next_id += 1;
        let src = AnchorSource {
            basis: orthonormal_rows(params.subspace_dim, params.dim, &mut rng),
            diversity: rng.random_range(params.diversity.0..=params.diversity.1),
        };
        let video = generate_anchor_video(id.clone(), &src, params, &mut rng);
        relevance.insert(id.clone(), BTreeSet::new());
        anchor_ids.push(id);
        sources.push(src);
        videos.push(video);
    }

    for d in 0..n_derived {
        let anchor_idx = d % n_anchors;
        let id = make_id(next_id);
        next_id += 1;
        let derived = derive_positive(id.clone(), &videos[anchor_idx], params, &mut rng);
        relevance
            .get_mut(&anchor_ids[anchor_idx])
            .expect("anchor registered")
            .insert(id);
        videos.push(derived);
    }

    for _ in 0..n_distractors {
        let id = make_id(next_id);
        next_id += 1;
        let src = AnchorSource {
            basis: orthonormal_rows(params.subspace_dim, params.dim, &mut rng),
            diversity: rng.random_range(params.diversity.0..=params.diversity.1),
        };
        videos.push(generate_anchor_video(id, &src, params, &mut rng));
    }

    // Interleave storage order so ids do not encode the video role ordering
    // beyond generation; ranking code must not rely on positions.
    let mut order: Vec<usize> = (0..videos.len()).collect();
    order.shuffle(&mut rng);
    let mut shuffled = Vec::with_capacity(videos.len());
    for &i in &order {
        shuffled.push(videos[i].clone());
    }

    SyntheticCorpus { videos: shuffled, relevance, anchor_ids }
}
