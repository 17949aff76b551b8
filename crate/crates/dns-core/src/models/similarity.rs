//! Similarity assemblies: the teacher and the two fine-grained students
//! compose region weighting (or hashing), the Chamfer frame-to-frame kernel,
//! the comparator CNN, and the final Chamfer collapse; the selector's
//! self-similarity head swaps Chamfer for averaging.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha20Rng;

use super::{
    fetch_any, Binarization, BinarizationVars, Comparator, ComparatorConfig, ComparatorVars,
    HAttention, HAttentionVars, L2Attention, ModelResult, ParamBindings, TapeResult,
};
use crate::autodiff::{Tape, Var};
use crate::features::{FineRepresentation, RegionFeatureTensor};
use crate::kernels;
use crate::tensor::Tensor;

/// Chamfer frame-to-frame similarity on the tape:
/// `q [Nq,Rq,D] x p [Np,Rp,D] -> [Nq,Np]`.
pub(crate) fn chamfer_f2f_on_tape(tape: &Tape, q: Var, p: Var) -> TapeResult<Var> {
    let dots = tape.contract_last(q, p)?;
    let best = tape.max_axis(dots, 3)?;
    Ok(tape.mean_axis(best, 1)?)
}

/// Video-level collapse on the tape: clamp, max over columns, mean over rows.
pub(crate) fn v2v_on_tape(tape: &Tape, mv: Var) -> TapeResult<Var> {
    let clamped = tape.htanh(mv);
    let best = tape.max_axis(clamped, 1)?;
    Ok(tape.mean_axis(best, 0)?)
}

/// The supervised teacher: context-vector attention plus a comparator.
#[derive(Debug)]
pub struct TeacherModel {
    pub attention: L2Attention,
    pub comparator: Comparator,
    forward_count: AtomicU64,
}

impl Clone for TeacherModel {
    fn clone(&self) -> Self {
        Self {
            attention: self.attention.clone(),
            comparator: self.comparator.clone(),
            forward_count: AtomicU64::new(0),
        }
    }
}

pub struct TeacherVars {
    pub attention: super::L2AttentionVars,
    pub comparator: ComparatorVars,
}

impl TeacherModel {
    pub fn new(attention: L2Attention, comparator: Comparator) -> Self {
        Self { attention, comparator, forward_count: AtomicU64::new(0) }
    }

    /// Near-passthrough comparator init keeps the initial similarity close to
    /// a pooled Chamfer score, which is already a usable ranking function.
    pub fn init(dim: usize, cfg: ComparatorConfig, rng: &mut ChaCha20Rng) -> Self {
        Self::new(
            L2Attention::init(dim, rng),
            Comparator::init_passthrough(cfg, 0.05, rng),
        )
    }

    /// Number of plain similarity forwards since construction.
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    /// Video-pair similarity on the retrieval path (no gradients).
    pub fn similarity(&self, q: &RegionFeatureTensor, p: &RegionFeatureTensor) -> ModelResult<f64> {
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let qw = self.attention.weigh_plain(q);
        let pw = self.attention.weigh_plain(p);
        let m = kernels::frame_to_frame(&qw, &pw)?;
        let mv = self.comparator.forward_plain(&m)?;
        Ok(kernels::video_to_video(&mv)?)
    }

    pub fn trainable(&self, tape: &Tape, reg: &mut ParamBindings) -> TeacherVars {
        TeacherVars {
            attention: self.attention.trainable(tape, reg, "teacher.attn"),
            comparator: self.comparator.trainable(tape, reg, "teacher.vc"),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.attention.named_tensors("teacher.attn");
        out.extend(self.comparator.named_tensors("teacher.vc"));
        out
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>) -> ModelResult<Self> {
        let context = fetch_any(map, "teacher.attn.context")?;
        let dim = context.len();
        Ok(Self::new(
            L2Attention::from_tensors(map, "teacher.attn", dim)?,
            Comparator::from_tensors(map, "teacher.vc")?,
        ))
    }
}

impl TeacherVars {
    /// Returns `(similarity, comparator_output)`; the comparator output feeds
    /// the saturation regularizer.
    pub fn similarity(&self, tape: &Tape, q: Var, p: Var) -> TapeResult<(Var, Var)> {
        let qw = self.attention.weigh(tape, q)?;
        let pw = self.attention.weigh(tape, p)?;
        let m = chamfer_f2f_on_tape(tape, qw, pw)?;
        let mv = self.comparator.forward(tape, m)?;
        Ok((v2v_on_tape(tape, mv)?, mv))
    }
}

/// Fine-grained student with the hidden-layer attention scheme.
#[derive(Debug, Clone)]
pub struct FineAttentionStudent {
    pub attention: HAttention,
    pub comparator: Comparator,
}

pub struct FineAttentionVars {
    pub attention: HAttentionVars,
    pub comparator: ComparatorVars,
}

impl FineAttentionStudent {
    pub fn init(dim: usize, cfg: ComparatorConfig, rng: &mut ChaCha20Rng) -> Self {
        Self {
            attention: HAttention::init(dim, rng),
            comparator: Comparator::init_passthrough(cfg, 0.05, rng),
        }
    }

    pub fn trainable(&self, tape: &Tape, reg: &mut ParamBindings) -> FineAttentionVars {
        FineAttentionVars {
            attention: self.attention.trainable(tape, reg, "fine_attn.attn"),
            comparator: self.comparator.trainable(tape, reg, "fine_attn.vc"),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.attention.named_tensors("fine_attn.attn");
        out.extend(self.comparator.named_tensors("fine_attn.vc"));
        out
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>) -> ModelResult<Self> {
        let context = fetch_any(map, "fine_attn.attn.context")?;
        let dim = context.len();
        Ok(Self {
            attention: HAttention::from_tensors(map, "fine_attn.attn", dim)?,
            comparator: Comparator::from_tensors(map, "fine_attn.vc")?,
        })
    }
}

impl FineAttentionVars {
    pub fn similarity(&self, tape: &Tape, q: Var, p: Var) -> TapeResult<(Var, Var)> {
        let qw = self.attention.weigh(tape, q)?;
        let pw = self.attention.weigh(tape, p)?;
        let m = chamfer_f2f_on_tape(tape, qw, pw)?;
        let mv = self.comparator.forward(tape, m)?;
        Ok((v2v_on_tape(tape, mv)?, mv))
    }
}

/// Fine-grained student hashing regions to sign codes.
#[derive(Debug, Clone)]
pub struct BinarizationStudent {
    pub binarization: Binarization,
    pub comparator: Comparator,
}

pub struct BinarizationStudentVars {
    pub binarization: BinarizationVars,
    pub comparator: ComparatorVars,
}

impl BinarizationStudent {
    pub fn init(dim: usize, bits: usize, sigma: f64, cfg: ComparatorConfig, rng: &mut ChaCha20Rng) -> Self {
        Self {
            binarization: Binarization::init(dim, bits, sigma, rng),
            comparator: Comparator::init_passthrough(cfg, 0.05, rng),
        }
    }

    pub fn trainable(&self, tape: &Tape, reg: &mut ParamBindings) -> BinarizationStudentVars {
        BinarizationStudentVars {
            binarization: self.binarization.trainable(tape, reg, "fine_bin.bin"),
            comparator: self.comparator.trainable(tape, reg, "fine_bin.vc"),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.binarization.named_tensors("fine_bin.bin");
        out.extend(self.comparator.named_tensors("fine_bin.vc"));
        out
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>) -> ModelResult<Self> {
        let w = fetch_any(map, "fine_bin.bin.weights")?;
        let (dim, bits) = (w.shape()[0], w.shape()[1]);
        Ok(Self {
            binarization: Binarization::from_tensors(map, "fine_bin.bin", dim, bits)?,
            comparator: Comparator::from_tensors(map, "fine_bin.vc")?,
        })
    }
}

impl BinarizationStudentVars {
    /// Training-path similarity on soft codes (erf surrogate).
    pub fn similarity(&self, tape: &Tape, q: Var, p: Var) -> TapeResult<(Var, Var)> {
        let qb = self.binarization.binarize_train(tape, q)?;
        let pb = self.binarization.binarize_train(tape, p)?;
        let bits = tape.shape_of(qb)[2];
        let dots = tape.contract_last(qb, pb)?;
        let scaled = tape.scale(dots, 1.0 / bits as f64)?;
        let best = tape.max_axis(scaled, 3)?;
        let m = tape.mean_axis(best, 1)?;
        let mv = self.comparator.forward(tape, m)?;
        Ok((v2v_on_tape(tape, mv)?, mv))
    }
}

/// A fine-grained student of either flavor, as used at indexing and retrieval
/// time.
#[derive(Debug, Clone)]
pub enum FineStudent {
    Attention(FineAttentionStudent),
    Binarization(BinarizationStudent),
}

impl FineStudent {
    pub fn comparator(&self) -> &Comparator {
        match self {
            FineStudent::Attention(s) => &s.comparator,
            FineStudent::Binarization(s) => &s.comparator,
        }
    }

    /// The representation stored in the index for this student.
    pub fn index_representation(&self, x: &RegionFeatureTensor) -> ModelResult<FineRepresentation> {
        match self {
            FineStudent::Attention(s) => Ok(FineRepresentation::Float(s.attention.weigh_plain(x))),
            FineStudent::Binarization(s) => {
                Ok(FineRepresentation::Binary(s.binarization.binarize_eval(x)?))
            }
        }
    }

    /// Retrieval-path similarity straight from stored representations.
    pub fn similarity_from_index(
        &self,
        q: &FineRepresentation,
        p: &FineRepresentation,
    ) -> ModelResult<f64> {
        let m = match (q, p) {
            (FineRepresentation::Float(a), FineRepresentation::Float(b)) => {
                kernels::frame_to_frame(a, b)?
            }
            (FineRepresentation::Binary(a), FineRepresentation::Binary(b)) => {
                kernels::hamming_frame_to_frame(a, b)?
            }
            _ => {
                return Err(super::ModelError::InvalidConfig(
                    "mixed float/binary representations in one index".into(),
                ))
            }
        };
        let mv = self.comparator().forward_plain(&m)?;
        Ok(kernels::video_to_video(&mv)?)
    }

    /// End-to-end similarity from raw (whitened) tensors.
    pub fn similarity(&self, q: &RegionFeatureTensor, p: &RegionFeatureTensor) -> ModelResult<f64> {
        let qr = self.index_representation(q)?;
        let pr = self.index_representation(p)?;
        self.similarity_from_index(&qr, &pr)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        match self {
            FineStudent::Attention(s) => s.named_tensors(),
            FineStudent::Binarization(s) => s.named_tensors(),
        }
    }
}

/// Selector feature extractor: attention weighting, average-pooled
/// self-similarity, comparator refinement, and a plain mean.
#[derive(Debug, Clone)]
pub struct SelfSimilarityHead {
    pub attention: HAttention,
    pub comparator: Comparator,
}

impl SelfSimilarityHead {
    pub fn new(attention: HAttention, comparator: Comparator) -> Self {
        Self { attention, comparator }
    }

    /// The indexed self-similarity scalar for one video.
    pub fn score(&self, x: &RegionFeatureTensor) -> ModelResult<f64> {
        let weighted = self.attention.weigh_plain(x);
        let m = kernels::self_similarity_matrix(&weighted);
        let mv = self.comparator.forward_plain(&m)?;
        Ok(kernels::self_similarity_score(&mv)?)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.attention.named_tensors("selector.head.attn");
        out.extend(self.comparator.named_tensors("selector.head.vc"));
        out
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>) -> ModelResult<Self> {
        let context = fetch_any(map, "selector.head.attn.context")?;
        let dim = context.len();
        Ok(Self {
            attention: HAttention::from_tensors(map, "selector.head.attn", dim)?,
            comparator: Comparator::from_tensors(map, "selector.head.vc")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{generate_synthetic_corpus, CorpusParams};
    use crate::tensor::l2_normalize_slice;
    use rand::{Rng, SeedableRng};

    fn tiny_vc() -> ComparatorConfig {
        ComparatorConfig { channels: (2, 3, 2) }
    }

    fn unit_video(id: &str, n: usize, r: usize, d: usize, rng: &mut ChaCha20Rng) -> RegionFeatureTensor {
        let mut values: Vec<f64> = (0..n * r * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in values.chunks_mut(d) {
            l2_normalize_slice(c);
        }
        RegionFeatureTensor::new(id, n, r, d, values).unwrap()
    }

    // -- straight-line reference implementation, independent of the tape --

    fn naive_l2_weigh(x: &RegionFeatureTensor, u: &[f64]) -> Vec<Vec<f64>> {
        let mut frames = Vec::new();
        for f in 0..x.frames() {
            let mut regions = Vec::new();
            for r in 0..x.regions() {
                let region = x.region(f, r);
                let w = (region.iter().zip(u).map(|(&a, &b)| a * b).sum::<f64>() + 1.0) / 2.0;
                regions.extend(region.iter().map(|&v| v * w));
            }
            frames.push(regions);
        }
        frames
    }

    fn naive_chamfer(q: &[Vec<f64>], p: &[Vec<f64>], r: usize, d: usize) -> Vec<Vec<f64>> {
        q.iter()
            .map(|qf| {
                p.iter()
                    .map(|pf| {
                        let mut acc = 0.0;
                        for j in 0..r {
                            let mut best = f64::NEG_INFINITY;
                            for l in 0..r {
                                let mut s = 0.0;
                                for t in 0..d {
                                    s += qf[j * d + t] * pf[l * d + t];
                                }
                                best = best.max(s);
                            }
                            acc += best;
                        }
                        acc / r as f64
                    })
                    .collect()
            })
            .collect()
    }

    fn naive_conv(
        x: &[Vec<Vec<f64>>],
        w: &Tensor,
        b: &Tensor,
    ) -> Vec<Vec<Vec<f64>>> {
        let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (h, wid) = (x[0].len(), x[0][0].len());
        let mut out = vec![vec![vec![0.0; wid]; h]; cout];
        for co in 0..cout {
            for i in 0..h {
                for j in 0..wid {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let si = i as isize + u as isize - (kh / 2) as isize;
                                let sj = j as isize + v as isize - (kw / 2) as isize;
                                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < wid {
                                    acc += x[ci][si as usize][sj as usize]
                                        * w.data()[((co * cin + ci) * kh + u) * kw + v];
                                }
                            }
                        }
                    }
                    out[co][i][j] = acc;
                }
            }
        }
        out
    }

    fn naive_relu(x: &mut [Vec<Vec<f64>>]) {
        for c in x {
            for row in c {
                for v in row {
                    *v = v.max(0.0);
                }
            }
        }
    }

    fn naive_pool(x: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
        let (h, w) = (x[0].len(), x[0][0].len());
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        x.iter()
            .map(|c| {
                (0..oh)
                    .map(|i| {
                        (0..ow)
                            .map(|j| {
                                let mut best = f64::NEG_INFINITY;
                                for a in 2 * i..(2 * i + 2).min(h) {
                                    for bb in 2 * j..(2 * j + 2).min(w) {
                                        best = best.max(c[a][bb]);
                                    }
                                }
                                best
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn naive_teacher(teacher: &TeacherModel, q: &RegionFeatureTensor, p: &RegionFeatureTensor) -> f64 {
        let u = teacher.attention.context.data();
        let qw = naive_l2_weigh(q, u);
        let pw = naive_l2_weigh(p, u);
        let m = naive_chamfer(&qw, &pw, q.regions(), q.dim());
        let x = vec![m];
        let x1 = {
            let mut c = naive_conv(&x, &teacher.comparator.conv1_w, &teacher.comparator.conv1_b);
            naive_relu(&mut c);
            naive_pool(&c)
        };
        let x2 = {
            let mut c = naive_conv(&x1, &teacher.comparator.conv2_w, &teacher.comparator.conv2_b);
            naive_relu(&mut c);
            naive_pool(&c)
        };
        let x3 = {
            let mut c = naive_conv(&x2, &teacher.comparator.conv3_w, &teacher.comparator.conv3_b);
            naive_relu(&mut c);
            c
        };
        let x4 = naive_conv(&x3, &teacher.comparator.conv4_w, &teacher.comparator.conv4_b);
        let mv = &x4[0];
        let mut acc = 0.0;
        for row in mv {
            let best = row.iter().map(|v| v.clamp(-1.0, 1.0)).fold(f64::NEG_INFINITY, f64::max);
            acc += best;
        }
        acc / mv.len() as f64
    }

    #[test]
    fn teacher_matches_the_straight_line_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let teacher = TeacherModel::init(6, tiny_vc(), &mut rng);
        for trial in 0..5 {
            let q = unit_video("q", 4 + trial, 2, 6, &mut rng);
            let p = unit_video("p", 5, 2, 6, &mut rng);
            let got = teacher.similarity(&q, &p).unwrap();
            let want = naive_teacher(&teacher, &q, &p);
            assert!((got - want).abs() < 1e-6, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn single_frame_identical_videos_with_passthrough_score_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let teacher = TeacherModel::new(
            L2Attention {
                context: {
                    let mut u = crate::tensor::randn(vec![4], 1.0, &mut rng);
                    l2_normalize_slice(u.data_mut());
                    u
                },
            },
            Comparator::init_passthrough(tiny_vc(), 0.0, &mut rng),
        );
        // Single frame, one region, aligned with the context vector so the
        // attention weight is exactly 1.
        let v = RegionFeatureTensor::new("v", 1, 1, 4, teacher.attention.context.data().to_vec()).unwrap();
        let s = teacher.similarity(&v, &v).unwrap();
        assert!((s - 1.0).abs() < 1e-5, "{s}");
    }

    #[test]
    fn teacher_ranks_its_own_content_above_noise() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let teacher = TeacherModel::init(16, tiny_vc(), &mut rng);
        let params = CorpusParams::default();
        let corpus = generate_synthetic_corpus(5, 30, &params);
        let mut wins = 0usize;
        let mut total = 0usize;
        for (anchor, positives) in &corpus.relevance {
            let a = corpus.video(anchor).unwrap();
            for pos_id in positives {
                let pos = corpus.video(pos_id).unwrap();
                let unrelated = corpus
                    .videos
                    .iter()
                    .find(|v| {
                        v.video_id() != anchor
                            && !positives.contains(v.video_id())
                            && !corpus.relevance.contains_key(v.video_id())
                    })
                    .unwrap();
                let sp = teacher.similarity(a, pos).unwrap();
                let sn = teacher.similarity(a, unrelated).unwrap();
                total += 1;
                if sp > sn {
                    wins += 1;
                }
            }
        }
        assert!(total >= 10);
        assert!(
            wins as f64 >= 0.95 * total as f64,
            "teacher ranked positives above noise in only {wins}/{total} trials"
        );
    }

    #[test]
    fn forward_counter_tracks_similarity_calls() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let teacher = TeacherModel::init(4, tiny_vc(), &mut rng);
        let v = unit_video("v", 4, 1, 4, &mut rng);
        assert_eq!(teacher.forward_count(), 0);
        teacher.similarity(&v, &v).unwrap();
        teacher.similarity(&v, &v).unwrap();
        assert_eq!(teacher.forward_count(), 2);
    }

    #[test]
    fn tape_similarity_matches_plain_path_for_both_students() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let q = unit_video("q", 5, 2, 8, &mut rng);
        let p = unit_video("p", 4, 2, 8, &mut rng);

        let attn = FineAttentionStudent::init(8, tiny_vc(), &mut rng);
        let plain = FineStudent::Attention(attn.clone()).similarity(&q, &p).unwrap();
        let tape = Tape::new();
        let mut reg = ParamBindings::new();
        let vars = attn.trainable(&tape, &mut reg);
        let qv = tape.constant(q.to_tensor());
        let pv = tape.constant(p.to_tensor());
        let (score, _) = vars.similarity(&tape, qv, pv).unwrap();
        assert!((tape.value(score).item() - plain).abs() < 1e-9);

        // Binarization student: the tape path on soft codes must equal a
        // plain recomputation with the same erf surrogate.
        let bin = BinarizationStudent::init(8, 12, 1e-3, tiny_vc(), &mut rng);
        let soft = |x: &RegionFeatureTensor| -> Vec<Vec<f64>> {
            (0..x.frames())
                .map(|f| {
                    let mut frame = Vec::new();
                    for r in 0..x.regions() {
                        for l in 0..12 {
                            let mut pre = 0.0;
                            for (t, &v) in x.region(f, r).iter().enumerate() {
                                pre += v * bin.binarization.weights.data()[t * 12 + l];
                            }
                            frame.push(libm::erf(pre / (std::f64::consts::SQRT_2 * 1e-3)));
                        }
                    }
                    frame
                })
                .collect()
        };
        let (qs, ps) = (soft(&q), soft(&p));
        let mut m = vec![0.0; q.frames() * p.frames()];
        for i in 0..q.frames() {
            for k in 0..p.frames() {
                let mut acc = 0.0;
                for j in 0..q.regions() {
                    let mut best = f64::NEG_INFINITY;
                    for l in 0..p.regions() {
                        let mut s = 0.0;
                        for t in 0..12 {
                            s += qs[i][j * 12 + t] * ps[k][l * 12 + t];
                        }
                        best = best.max(s / 12.0);
                    }
                    acc += best;
                }
                m[i * p.frames() + k] = acc / q.regions() as f64;
            }
        }
        let mv = bin
            .comparator
            .forward_plain(&crate::kernels::SimilarityMatrix::new(q.frames(), p.frames(), m))
            .unwrap();
        let plain = crate::kernels::video_to_video(&mv).unwrap();

        let tape = Tape::new();
        let mut reg = ParamBindings::new();
        let vars = bin.trainable(&tape, &mut reg);
        let qv = tape.constant(q.to_tensor());
        let pv = tape.constant(p.to_tensor());
        let (score, _) = vars.similarity(&tape, qv, pv).unwrap();
        assert!((tape.value(score).item() - plain).abs() < 1e-9);
    }

    #[test]
    fn end_to_end_gradient_reaches_the_attention_context() {
        use std::collections::BTreeMap as Map;
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let teacher = TeacherModel::init(4, tiny_vc(), &mut rng);
        let q = unit_video("q", 2, 2, 4, &mut rng);
        let p = unit_video("p", 2, 2, 4, &mut rng);
        let mut leaves: Map<String, Tensor> = teacher
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.with_grad()))
            .collect();
        leaves.insert("q".into(), q.to_tensor());
        leaves.insert("p".into(), p.to_tensor());
        let graph = |t: &Tape, v: &Map<String, crate::autodiff::Var>| {
            let vars = TeacherVars {
                attention: crate::models::L2AttentionVars { context: v["teacher.attn.context"] },
                comparator: ComparatorVars {
                    conv1_w: v["teacher.vc.conv1_w"],
                    conv1_b: v["teacher.vc.conv1_b"],
                    conv2_w: v["teacher.vc.conv2_w"],
                    conv2_b: v["teacher.vc.conv2_b"],
                    conv3_w: v["teacher.vc.conv3_w"],
                    conv3_b: v["teacher.vc.conv3_b"],
                    conv4_w: v["teacher.vc.conv4_w"],
                    conv4_b: v["teacher.vc.conv4_b"],
                },
            };
            let (score, _) = vars.similarity(t, v["q"], v["p"])?;
            Ok(score)
        };
        let err = crate::autodiff::finite_difference_check(&graph, &leaves, "teacher.attn.context", 1e-5).unwrap();
        assert!(err <= 1e-6, "context grad err {err:.2e}");
    }
}
