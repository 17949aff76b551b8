//! Coarse video embedder: attention-weighted region pooling, a single
//! transformer encoder layer over frames, NetVLAD aggregation, and a
//! projection to one l2-normalized global vector.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{
    fetch, fetch_any, fetch_scalar, xavier, HAttention, HAttentionVars, ModelError, ModelResult,
    ParamBindings, TapeResult,
};
use crate::autodiff::{Tape, Var};
use crate::features::RegionFeatureTensor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub clusters: usize,
    pub out_dim: usize,
    /// Skips the transformer (and its positional encoding) when false, making
    /// the embedding invariant to frame order.
    pub use_transformer: bool,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            heads: 8,
            ff_dim: 2048,
            clusters: 64,
            out_dim: 1024,
            use_transformer: true,
        }
    }
}

impl CoarseConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    fn validate(&self) -> ModelResult<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.clusters == 0 || self.out_dim == 0 || self.ff_dim == 0 {
            return Err(ModelError::InvalidConfig("zero-sized coarse component".into()));
        }
        Ok(())
    }
}

/// Fixed sinusoidal positional encoding, `[n, dim]`.
pub fn sinusoidal_encoding(n: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; n * dim];
    for pos in 0..n {
        for i in 0..dim / 2 {
            let rate = (pos as f64) / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = rate.sin();
            data[pos * dim + 2 * i + 1] = rate.cos();
        }
        if dim % 2 == 1 {
            let i = dim / 2;
            let rate = (pos as f64) / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + dim - 1] = rate.sin();
        }
    }
    Tensor::new(vec![n, dim], data).expect("shape")
}

/// One post-norm transformer encoder layer with multi-head self-attention.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub heads: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

pub struct TransformerLayerVars {
    pub heads: usize,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

impl TransformerLayer {
    pub fn init(dim: usize, heads: usize, ff_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            heads,
            wq: xavier(vec![dim, dim], dim, dim, rng),
            bq: Tensor::zeros(vec![dim]),
            wk: xavier(vec![dim, dim], dim, dim, rng),
            bk: Tensor::zeros(vec![dim]),
            wv: xavier(vec![dim, dim], dim, dim, rng),
            bv: Tensor::zeros(vec![dim]),
            wo: xavier(vec![dim, dim], dim, dim, rng),
            bo: Tensor::zeros(vec![dim]),
            ln1_g: Tensor::filled(vec![dim], 1.0),
            ln1_b: Tensor::zeros(vec![dim]),
            ff1_w: xavier(vec![dim, ff_dim], dim, ff_dim, rng),
            ff1_b: Tensor::zeros(vec![ff_dim]),
            ff2_w: xavier(vec![ff_dim, dim], ff_dim, dim, rng),
            ff2_b: Tensor::zeros(vec![dim]),
            ln2_g: Tensor::filled(vec![dim], 1.0),
            ln2_b: Tensor::zeros(vec![dim]),
        }
    }

    pub fn frozen(&self, tape: &Tape) -> TransformerLayerVars {
        TransformerLayerVars {
            heads: self.heads,
            wq: tape.constant(self.wq.clone()),
            bq: tape.constant(self.bq.clone()),
            wk: tape.constant(self.wk.clone()),
            bk: tape.constant(self.bk.clone()),
            wv: tape.constant(self.wv.clone()),
            bv: tape.constant(self.bv.clone()),
            wo: tape.constant(self.wo.clone()),
            bo: tape.constant(self.bo.clone()),
            ln1_g: tape.constant(self.ln1_g.clone()),
            ln1_b: tape.constant(self.ln1_b.clone()),
            ff1_w: tape.constant(self.ff1_w.clone()),
            ff1_b: tape.constant(self.ff1_b.clone()),
            ff2_w: tape.constant(self.ff2_w.clone()),
            ff2_b: tape.constant(self.ff2_b.clone()),
            ln2_g: tape.constant(self.ln2_g.clone()),
            ln2_b: tape.constant(self.ln2_b.clone()),
        }
    }

    pub fn trainable(&self, tape: &Tape, reg: &mut ParamBindings, prefix: &str) -> TransformerLayerVars {
        TransformerLayerVars {
            heads: self.heads,
            wq: reg.bind(tape, format!("{prefix}.wq"), &self.wq),
            bq: reg.bind(tape, format!("{prefix}.bq"), &self.bq),
            wk: reg.bind(tape, format!("{prefix}.wk"), &self.wk),
            bk: reg.bind(tape, format!("{prefix}.bk"), &self.bk),
            wv: reg.bind(tape, format!("{prefix}.wv"), &self.wv),
            bv: reg.bind(tape, format!("{prefix}.bv"), &self.bv),
            wo: reg.bind(tape, format!("{prefix}.wo"), &self.wo),
            bo: reg.bind(tape, format!("{prefix}.bo"), &self.bo),
            ln1_g: reg.bind(tape, format!("{prefix}.ln1_g"), &self.ln1_g),
            ln1_b: reg.bind(tape, format!("{prefix}.ln1_b"), &self.ln1_b),
            ff1_w: reg.bind(tape, format!("{prefix}.ff1_w"), &self.ff1_w),
            ff1_b: reg.bind(tape, format!("{prefix}.ff1_b"), &self.ff1_b),
            ff2_w: reg.bind(tape, format!("{prefix}.ff2_w"), &self.ff2_w),
            ff2_b: reg.bind(tape, format!("{prefix}.ff2_b"), &self.ff2_b),
            ln2_g: reg.bind(tape, format!("{prefix}.ln2_g"), &self.ln2_g),
            ln2_b: reg.bind(tape, format!("{prefix}.ln2_b"), &self.ln2_b),
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.heads"), Tensor::scalar(self.heads as f64)),
            (format!("{prefix}.wq"), self.wq.clone()),
            (format!("{prefix}.bq"), self.bq.clone()),
            (format!("{prefix}.wk"), self.wk.clone()),
            (format!("{prefix}.bk"), self.bk.clone()),
            (format!("{prefix}.wv"), self.wv.clone()),
            (format!("{prefix}.bv"), self.bv.clone()),
            (format!("{prefix}.wo"), self.wo.clone()),
            (format!("{prefix}.bo"), self.bo.clone()),
            (format!("{prefix}.ln1_g"), self.ln1_g.clone()),
            (format!("{prefix}.ln1_b"), self.ln1_b.clone()),
            (format!("{prefix}.ff1_w"), self.ff1_w.clone()),
            (format!("{prefix}.ff1_b"), self.ff1_b.clone()),
            (format!("{prefix}.ff2_w"), self.ff2_w.clone()),
            (format!("{prefix}.ff2_b"), self.ff2_b.clone()),
            (format!("{prefix}.ln2_g"), self.ln2_g.clone()),
            (format!("{prefix}.ln2_b"), self.ln2_b.clone()),
        ]
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>, prefix: &str, dim: usize, ff_dim: usize) -> ModelResult<Self> {
        let heads = fetch_scalar(map, &format!("{prefix}.heads"))? as usize;
        Ok(Self {
            heads,
            wq: fetch(map, &format!("{prefix}.wq"), &[dim, dim])?,
            bq: fetch(map, &format!("{prefix}.bq"), &[dim])?,
            wk: fetch(map, &format!("{prefix}.wk"), &[dim, dim])?,
            bk: fetch(map, &format!("{prefix}.bk"), &[dim])?,
            wv: fetch(map, &format!("{prefix}.wv"), &[dim, dim])?,
            bv: fetch(map, &format!("{prefix}.bv"), &[dim])?,
            wo: fetch(map, &format!("{prefix}.wo"), &[dim, dim])?,
            bo: fetch(map, &format!("{prefix}.bo"), &[dim])?,
            ln1_g: fetch(map, &format!("{prefix}.ln1_g"), &[dim])?,
            ln1_b: fetch(map, &format!("{prefix}.ln1_b"), &[dim])?,
            ff1_w: fetch(map, &format!("{prefix}.ff1_w"), &[dim, ff_dim])?,
            ff1_b: fetch(map, &format!("{prefix}.ff1_b"), &[ff_dim])?,
            ff2_w: fetch(map, &format!("{prefix}.ff2_w"), &[ff_dim, dim])?,
            ff2_b: fetch(map, &format!("{prefix}.ff2_b"), &[dim])?,
            ln2_g: fetch(map, &format!("{prefix}.ln2_g"), &[dim])?,
            ln2_b: fetch(map, &format!("{prefix}.ln2_b"), &[dim])?,
        })
    }
}

impl TransformerLayerVars {
    /// `x: [N, D]` -> `[N, D]`.
    pub fn encode(&self, tape: &Tape, x: Var) -> TapeResult<Var> {
        let d = tape.shape_of(x)[1];
        let dh = d / self.heads;

        let q = tape.broadcast_add_row(tape.matmul(x, self.wq)?, self.bq)?;
        let k = tape.broadcast_add_row(tape.matmul(x, self.wk)?, self.bk)?;
        let v = tape.broadcast_add_row(tape.matmul(x, self.wv)?, self.bv)?;

        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_axis(q, 1, h * dh, dh)?;
            let kh = tape.slice_axis(k, 1, h * dh, dh)?;
            let vh = tape.slice_axis(v, 1, h * dh, dh)?;
            let kt = tape.permute(kh, &[1, 0])?;
            let scores = tape.scale(tape.matmul(qh, kt)?, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax_last(scores)?;
            head_outputs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat(1, &head_outputs)?;
        let projected = tape.broadcast_add_row(tape.matmul(merged, self.wo)?, self.bo)?;
        let res1 = tape.add(x, projected)?;
        let norm1 = tape.layer_norm(res1, self.ln1_g, self.ln1_b, 1e-5)?;

        let ff = tape.broadcast_add_row(tape.matmul(norm1, self.ff1_w)?, self.ff1_b)?;
        let ff = tape.relu(ff);
        let ff = tape.broadcast_add_row(tape.matmul(ff, self.ff2_w)?, self.ff2_b)?;
        let res2 = tape.add(norm1, ff)?;
        let norm2 = tape.layer_norm(res2, self.ln2_g, self.ln2_b, 1e-5)?;
        Ok(norm2)
    }
}

/// NetVLAD: learned cluster centers with soft assignment, aggregating frame
/// vectors into `clusters x dim` residual sums.
#[derive(Debug, Clone)]
pub struct NetVlad {
    pub centers: Tensor,
    pub assign_w: Tensor,
    pub assign_b: Tensor,
}

pub struct NetVladVars {
    pub centers: Var,
    pub assign_w: Var,
    pub assign_b: Var,
}

impl NetVlad {
    /// Centers come from sample frame vectors when available (falling back to
    /// Gaussian draws); the assignment temperature starts low so assignments
    /// begin near uniform.
    pub fn init(dim: usize, clusters: usize, sample_frames: &[Vec<f64>], rng: &mut ChaCha20Rng) -> Self {
        let mut centers = vec![0.0; clusters * dim];
        for k in 0..clusters {
            if sample_frames.is_empty() {
                for d in 0..dim {
                    centers[k * dim + d] = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.3;
                }
            } else {
                let pick = rng.random_range(0..sample_frames.len());
                centers[k * dim..(k + 1) * dim].copy_from_slice(&sample_frames[pick][..dim]);
            }
        }
        let alpha = 1.0;
        let mut assign_w = vec![0.0; dim * clusters];
        let mut assign_b = vec![0.0; clusters];
        for k in 0..clusters {
            let mut sq = 0.0;
            for d in 0..dim {
                assign_w[d * clusters + k] = 2.0 * alpha * centers[k * dim + d];
                sq += centers[k * dim + d] * centers[k * dim + d];
            }
            assign_b[k] = -alpha * sq;
        }
        Self {
            centers: Tensor::new(vec![clusters, dim], centers).expect("shape"),
            assign_w: Tensor::new(vec![dim, clusters], assign_w).expect("shape"),
            assign_b: Tensor::new(vec![clusters], assign_b).expect("shape"),
        }
    }

    pub fn frozen(&self, tape: &Tape) -> NetVladVars {
        NetVladVars {
            centers: tape.constant(self.centers.clone()),
            assign_w: tape.constant(self.assign_w.clone()),
            assign_b: tape.constant(self.assign_b.clone()),
        }
    }

    pub fn trainable(&self, tape: &Tape, reg: &mut ParamBindings, prefix: &str) -> NetVladVars {
        NetVladVars {
            centers: reg.bind(tape, format!("{prefix}.centers"), &self.centers),
            assign_w: reg.bind(tape, format!("{prefix}.assign_w"), &self.assign_w),
            assign_b: reg.bind(tape, format!("{prefix}.assign_b"), &self.assign_b),
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.centers"), self.centers.clone()),
            (format!("{prefix}.assign_w"), self.assign_w.clone()),
            (format!("{prefix}.assign_b"), self.assign_b.clone()),
        ]
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>, prefix: &str, dim: usize, clusters: usize) -> ModelResult<Self> {
        Ok(Self {
            centers: fetch(map, &format!("{prefix}.centers"), &[clusters, dim])?,
            assign_w: fetch(map, &format!("{prefix}.assign_w"), &[dim, clusters])?,
            assign_b: fetch(map, &format!("{prefix}.assign_b"), &[clusters])?,
        })
    }
}

impl NetVladVars {
    /// `x: [N, D]` -> `[K, D]`.
    pub fn aggregate(&self, tape: &Tape, x: Var) -> TapeResult<Var> {
        let logits = tape.broadcast_add_row(tape.matmul(x, self.assign_w)?, self.assign_b)?;
        let assign = tape.softmax_last(logits)?;
        Ok(tape.netvlad_aggregate(assign, x, self.centers)?)
    }
}

/// The full coarse student.
#[derive(Debug, Clone)]
pub struct CoarseStudent {
    pub config: CoarseConfig,
    pub attention: HAttention,
    pub transformer: TransformerLayer,
    pub vlad: NetVlad,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
}

pub struct CoarseStudentVars {
    pub use_transformer: bool,
    pub attention: HAttentionVars,
    pub transformer: TransformerLayerVars,
    pub vlad: NetVladVars,
    pub proj_w: Var,
    pub proj_b: Var,
    pub ln_g: Var,
    pub ln_b: Var,
}

impl CoarseStudent {
    pub fn init(config: CoarseConfig, sample_frames: &[Vec<f64>], rng: &mut ChaCha20Rng) -> ModelResult<Self> {
        config.validate()?;
        let vlad_dim = config.clusters * config.dim;
        Ok(Self {
            config,
            attention: HAttention::init(config.dim, rng),
            transformer: TransformerLayer::init(config.dim, config.heads, config.ff_dim, rng),
            vlad: NetVlad::init(config.dim, config.clusters, sample_frames, rng),
            proj_w: xavier(vec![vlad_dim, config.out_dim], vlad_dim, config.out_dim, rng),
            proj_b: Tensor::zeros(vec![config.out_dim]),
            ln_g: Tensor::filled(vec![config.out_dim], 1.0),
            ln_b: Tensor::zeros(vec![config.out_dim]),
        })
    }

    pub fn frozen(&self, tape: &Tape) -> CoarseStudentVars {
        CoarseStudentVars {
            use_transformer: self.config.use_transformer,
            attention: self.attention.frozen(tape),
            transformer: self.transformer.frozen(tape),
            vlad: self.vlad.frozen(tape),
            proj_w: tape.constant(self.proj_w.clone()),
            proj_b: tape.constant(self.proj_b.clone()),
            ln_g: tape.constant(self.ln_g.clone()),
            ln_b: tape.constant(self.ln_b.clone()),
        }
    }

    pub fn trainable(&self, tape: &Tape, reg: &mut ParamBindings, prefix: &str) -> CoarseStudentVars {
        CoarseStudentVars {
            use_transformer: self.config.use_transformer,
            attention: self.attention.trainable(tape, reg, &format!("{prefix}.attn")),
            transformer: self.transformer.trainable(tape, reg, &format!("{prefix}.tr")),
            vlad: self.vlad.trainable(tape, reg, &format!("{prefix}.vlad")),
            proj_w: reg.bind(tape, format!("{prefix}.proj_w"), &self.proj_w),
            proj_b: reg.bind(tape, format!("{prefix}.proj_b"), &self.proj_b),
            ln_g: reg.bind(tape, format!("{prefix}.ln_g"), &self.ln_g),
            ln_b: reg.bind(tape, format!("{prefix}.ln_b"), &self.ln_b),
        }
    }

    /// Embeds a video into a unit vector, without gradient tracking.
    pub fn embed(&self, x: &RegionFeatureTensor) -> ModelResult<Vec<f64>> {
        let tape = Tape::new();
        let xv = tape.constant(x.to_tensor());
        let out = self.frozen(&tape).embed(&tape, xv)?;
        Ok(tape.value(out).into_data())
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (format!("{prefix}.use_transformer"), Tensor::scalar(f64::from(u8::from(self.config.use_transformer)))),
            (format!("{prefix}.proj_w"), self.proj_w.clone()),
            (format!("{prefix}.proj_b"), self.proj_b.clone()),
            (format!("{prefix}.ln_g"), self.ln_g.clone()),
            (format!("{prefix}.ln_b"), self.ln_b.clone()),
        ];
        out.extend(self.attention.named_tensors(&format!("{prefix}.attn")));
        out.extend(self.transformer.named_tensors(&format!("{prefix}.tr")));
        out.extend(self.vlad.named_tensors(&format!("{prefix}.vlad")));
        out
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>, prefix: &str) -> ModelResult<Self> {
        let proj_w = fetch_any(map, &format!("{prefix}.proj_w"))?;
        if proj_w.rank() != 2 {
            return Err(ModelError::InvalidConfig("coarse projection must be rank 2".into()));
        }
        let centers = fetch_any(map, &format!("{prefix}.vlad.centers"))?;
        let (clusters, dim) = (centers.shape()[0], centers.shape()[1]);
        let out_dim = proj_w.shape()[1];
        let ff1 = fetch_any(map, &format!("{prefix}.tr.ff1_w"))?;
        let ff_dim = ff1.shape()[1];
        let heads = fetch_scalar(map, &format!("{prefix}.tr.heads"))? as usize;
        let use_transformer = fetch_scalar(map, &format!("{prefix}.use_transformer"))? != 0.0;
        let config = CoarseConfig { dim, heads, ff_dim, clusters, out_dim, use_transformer };
        config.validate()?;
        Ok(Self {
            config,
            attention: HAttention::from_tensors(map, &format!("{prefix}.attn"), dim)?,
            transformer: TransformerLayer::from_tensors(map, &format!("{prefix}.tr"), dim, ff_dim)?,
            vlad: NetVlad::from_tensors(map, &format!("{prefix}.vlad"), dim, clusters)?,
            proj_w: fetch(map, &format!("{prefix}.proj_w"), &[clusters * dim, out_dim])?,
            proj_b: fetch(map, &format!("{prefix}.proj_b"), &[out_dim])?,
            ln_g: fetch(map, &format!("{prefix}.ln_g"), &[out_dim])?,
            ln_b: fetch(map, &format!("{prefix}.ln_b"), &[out_dim])?,
        })
    }
}

impl CoarseStudentVars {
    /// `x: [N, R, D]` -> unit vector `[out_dim]`.
    pub fn embed(&self, tape: &Tape, x: Var) -> TapeResult<Var> {
        let shape = tape.shape_of(x);
        let (n, _r, d) = (shape[0], shape[1], shape[2]);

        let weighted = self.attention.weigh(tape, x)?;
        let frames = tape.mean_axis(weighted, 1)?;

        let encoded = if self.use_transformer {
            let pos = tape.constant(sinusoidal_encoding(n, d));
            let with_pos = tape.add(frames, pos)?;
            self.transformer.encode(tape, with_pos)?
        } else {
            frames
        };

        let vlad = self.vlad.aggregate(tape, encoded)?;
        let vshape = tape.shape_of(vlad);
        let flat = tape.reshape(vlad, vec![1, vshape[0] * vshape[1]])?;
        let proj = tape.broadcast_add_row(tape.matmul(flat, self.proj_w)?, self.proj_b)?;
        let normed = tape.layer_norm(proj, self.ln_g, self.ln_b, 1e-5)?;
        let unit = tape.l2_normalize(normed)?;
        let out_dim = tape.shape_of(unit)[1];
        Ok(tape.reshape(unit, vec![out_dim])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::coarse_similarity;
    use crate::tensor::l2_normalize_slice;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> CoarseConfig {
        CoarseConfig {
            dim: 8,
            heads: 2,
            ff_dim: 16,
            clusters: 3,
            out_dim: 12,
            use_transformer: true,
        }
    }

    fn unit_video(id: &str, n: usize, rng: &mut ChaCha20Rng) -> RegionFeatureTensor {
        let mut values: Vec<f64> = (0..n * 2 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in values.chunks_mut(8) {
            l2_normalize_slice(c);
        }
        RegionFeatureTensor::new(id, n, 2, 8, values).unwrap()
    }

    #[test]
    fn identical_videos_embed_identically() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let model = CoarseStudent::init(tiny_config(), &[], &mut rng).unwrap();
        let v = unit_video("v", 6, &mut rng);
        let a = model.embed(&v).unwrap();
        let b = model.embed(&v).unwrap();
        assert!((coarse_similarity(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn output_is_always_unit_norm() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let model = CoarseStudent::init(tiny_config(), &[], &mut rng).unwrap();
        for n in [1usize, 3, 8] {
            let v = unit_video("v", n, &mut rng);
            let e = model.embed(&v).unwrap();
            let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert_eq!(e.len(), 12);
        }
    }

    #[test]
    fn frame_order_matters_with_the_transformer() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let model = CoarseStudent::init(tiny_config(), &[], &mut rng).unwrap();
        let v = unit_video("v", 8, &mut rng);
        let perm: Vec<usize> = vec![7, 2, 5, 0, 4, 1, 6, 3];
        let shuffled = v.select_frames(&perm);
        let a = model.embed(&v).unwrap();
        let b = model.embed(&shuffled).unwrap();
        let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_diff > 1e-4, "positional encoding should break order invariance, diff {max_diff}");
    }

    #[test]
    fn bypassing_the_transformer_makes_the_embedding_order_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let cfg = CoarseConfig { use_transformer: false, ..tiny_config() };
        let model = CoarseStudent::init(cfg, &[], &mut rng).unwrap();
        let v = unit_video("v", 7, &mut rng);
        let perm: Vec<usize> = vec![3, 6, 0, 5, 1, 4, 2];
        let shuffled = v.select_frames(&perm);
        let a = model.embed(&v).unwrap();
        let b = model.embed(&shuffled).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "bypass embedding must be exactly permutation-invariant");
    }

    #[test]
    fn rejects_indivisible_head_counts() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let cfg = CoarseConfig { dim: 10, heads: 4, ..tiny_config() };
        assert!(CoarseStudent::init(cfg, &[], &mut rng).is_err());
    }

    #[test]
    fn transformer_and_netvlad_gradients_match_finite_differences() {
        use std::collections::BTreeMap as Map;
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let model = CoarseStudent::init(tiny_config(), &[], &mut rng).unwrap();
        let v = unit_video("v", 3, &mut rng);

        let mut leaves: Map<String, Tensor> = model
            .named_tensors("c")
            .into_iter()
            .map(|(n, t)| (n, t.with_grad()))
            .collect();
        leaves.insert("x".into(), v.to_tensor());

        let graph = |t: &Tape, v: &Map<String, crate::autodiff::Var>| {
            let vars = CoarseStudentVars {
                use_transformer: true,
                attention: crate::models::HAttentionVars {
                    hidden_w: v["c.attn.hidden_w"],
                    hidden_b: v["c.attn.hidden_b"],
                    context: v["c.attn.context"],
                },
                transformer: TransformerLayerVars {
                    heads: 2,
                    wq: v["c.tr.wq"],
                    bq: v["c.tr.bq"],
                    wk: v["c.tr.wk"],
                    bk: v["c.tr.bk"],
                    wv: v["c.tr.wv"],
                    bv: v["c.tr.bv"],
                    wo: v["c.tr.wo"],
                    bo: v["c.tr.bo"],
                    ln1_g: v["c.tr.ln1_g"],
                    ln1_b: v["c.tr.ln1_b"],
                    ff1_w: v["c.tr.ff1_w"],
                    ff1_b: v["c.tr.ff1_b"],
                    ff2_w: v["c.tr.ff2_w"],
                    ff2_b: v["c.tr.ff2_b"],
                    ln2_g: v["c.tr.ln2_g"],
                    ln2_b: v["c.tr.ln2_b"],
                },
                vlad: NetVladVars {
                    centers: v["c.vlad.centers"],
                    assign_w: v["c.vlad.assign_w"],
                    assign_b: v["c.vlad.assign_b"],
                },
                proj_w: v["c.proj_w"],
                proj_b: v["c.proj_b"],
                ln_g: v["c.ln_g"],
                ln_b: v["c.ln_b"],
            };
            let e = vars.embed(t, v["x"])?;
            let w = t.constant(Tensor::vector((0..12).map(|i| 0.2 + 0.05 * i as f64).collect()));
            let p = t.mul(e, w)?;
            t.sum_all(p)
        };
        for leaf in ["c.tr.wq", "c.tr.ff1_w", "c.tr.ln2_g", "c.vlad.centers", "c.vlad.assign_w", "c.proj_w"] {
            let err = crate::autodiff::finite_difference_check(&graph, &leaves, leaf, 1e-5).unwrap();
            assert!(err <= 1e-5, "{leaf}: {err:.2e}");
        }
    }
}
