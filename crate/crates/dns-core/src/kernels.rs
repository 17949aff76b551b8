//! Frame-to-frame and video-to-video similarity kernels.
//!
//! All kernels are pure functions over immutable representations and safe to
//! call from many threads; the `*_many` batch variants parallelize over
//! targets while reusing the query and write results to disjoint slots.

use rayon::prelude::*;
use thiserror::Error;

use crate::features::{BinaryCodeTensor, RegionFeatureTensor};
use crate::tensor::dot;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("{what}: dimension mismatch ({left} vs {right})")]
    DimensionMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{0}: empty similarity matrix")]
    EmptyMatrix(&'static str),
}

/// Dense frame-pair similarity matrix, `rows x cols`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "matrix shape mismatch");
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Chamfer frame-to-frame similarity:
/// `M[i,k] = (1/R_q) * sum_j max_l <Q[i,j,.], P[k,l,.]>`.
///
/// Frame and region counts of the two videos are free to differ.
pub fn frame_to_frame(
    q: &RegionFeatureTensor,
    p: &RegionFeatureTensor,
) -> Result<SimilarityMatrix, KernelError> {
    if q.dim() != p.dim() {
        return Err(KernelError::DimensionMismatch {
            what: "frame_to_frame",
            left: q.dim(),
            right: p.dim(),
        });
    }
    let (nq, np_, rq, rp) = (q.frames(), p.frames(), q.regions(), p.regions());
    let mut values = vec![0.0; nq * np_];
    for i in 0..nq {
        for k in 0..np_ {
            let mut acc = 0.0;
            for j in 0..rq {
                let qr = q.region(i, j);
                let mut best = f64::NEG_INFINITY;
                for l in 0..rp {
                    let d = dot(qr, p.region(k, l));
                    if d > best {
                        best = d;
                    }
                }
                acc += best;
            }
            values[i * np_ + k] = acc / rq as f64;
        }
    }
    Ok(SimilarityMatrix::new(nq, np_, values))
}

/// Batch variant of [`frame_to_frame`] against many targets.
pub fn frame_to_frame_many(
    q: &RegionFeatureTensor,
    targets: &[&RegionFeatureTensor],
) -> Result<Vec<SimilarityMatrix>, KernelError> {
    targets.par_iter().map(|p| frame_to_frame(q, p)).collect()
}

fn masked_xor_popcount(a: &[u64], b: &[u64], last_mask: u64) -> u32 {
    let mut count = 0u32;
    let last = a.len() - 1;
    for i in 0..a.len() {
        let mut x = a[i] ^ b[i];
        if i == last {
            x &= last_mask;
        }
        count += x.count_ones();
    }
    count
}

fn last_word_mask(bits: usize) -> u64 {
    match bits % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Hamming-similarity Chamfer kernel on packed codes. Per region pair the
/// similarity is `(L - 2 * popcount(q XOR p)) / L`, evaluated on 64-bit words
/// with a fixed mask for the padded tail of the final word.
pub fn hamming_frame_to_frame(
    qb: &BinaryCodeTensor,
    pb: &BinaryCodeTensor,
) -> Result<SimilarityMatrix, KernelError> {
    if qb.bits() != pb.bits() {
        return Err(KernelError::DimensionMismatch {
            what: "hamming_frame_to_frame",
            left: qb.bits(),
            right: pb.bits(),
        });
    }
    let bits = qb.bits() as f64;
    let mask = last_word_mask(qb.bits());
    let (nq, np_, rq, rp) = (qb.frames(), pb.frames(), qb.regions(), pb.regions());
    let mut values = vec![0.0; nq * np_];
    for i in 0..nq {
        for k in 0..np_ {
            let mut acc = 0.0;
            for j in 0..rq {
                let qw = qb.code(i, j);
                let mut best = f64::NEG_INFINITY;
                for l in 0..rp {
                    let diff = masked_xor_popcount(qw, pb.code(k, l), mask);
                    let sim = (qb.bits() as f64 - 2.0 * f64::from(diff)) / bits;
                    if sim > best {
                        best = sim;
                    }
                }
                acc += best;
            }
            values[i * np_ + k] = acc / rq as f64;
        }
    }
    Ok(SimilarityMatrix::new(nq, np_, values))
}

/// Batch variant of [`hamming_frame_to_frame`] against many targets.
pub fn hamming_frame_to_frame_many(
    qb: &BinaryCodeTensor,
    targets: &[&BinaryCodeTensor],
) -> Result<Vec<SimilarityMatrix>, KernelError> {
    targets.par_iter().map(|p| hamming_frame_to_frame(qb, p)).collect()
}

/// Collapses a comparator output matrix to one score:
/// `(1/N'_q) * sum_i max_j Htanh(M[i,j])`. The clamp applies before the max.
pub fn video_to_video(m: &SimilarityMatrix) -> Result<f64, KernelError> {
    if m.is_empty() {
        return Err(KernelError::EmptyMatrix("video_to_video"));
    }
    let mut acc = 0.0;
    for i in 0..m.rows() {
        let best = m
            .row(i)
            .iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .fold(f64::NEG_INFINITY, f64::max);
        acc += best;
    }
    Ok(acc / m.rows() as f64)
}

/// Frame-to-frame self-similarity with the Chamfer max replaced by averaging:
/// `M[i,k] = (1/R^2) * sum_j sum_l <X[i,j,.], X[k,l,.]>`, which equals the
/// Gram matrix of the per-frame region means. Computed on the upper triangle
/// and mirrored, so the output is exactly symmetric.
pub fn self_similarity_matrix(x: &RegionFeatureTensor) -> SimilarityMatrix {
    let (n, r, d) = (x.frames(), x.regions(), x.dim());
    let mut means = vec![0.0; n * d];
    for f in 0..n {
        for j in 0..r {
            for (m, &v) in means[f * d..(f + 1) * d].iter_mut().zip(x.region(f, j)) {
                *m += v;
            }
        }
        for m in &mut means[f * d..(f + 1) * d] {
            *m /= r as f64;
        }
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for k in i..n {
            let v = dot(&means[i * d..(i + 1) * d], &means[k * d..(k + 1) * d]);
            values[i * n + k] = v;
            values[k * n + i] = v;
        }
    }
    SimilarityMatrix::new(n, n, values)
}

/// Mean of all entries of a comparator-refined self-similarity matrix. No
/// clamp is applied here.
pub fn self_similarity_score(m: &SimilarityMatrix) -> Result<f64, KernelError> {
    if m.is_empty() {
        return Err(KernelError::EmptyMatrix("self_similarity_score"));
    }
    Ok(m.values().iter().sum::<f64>() / m.values().len() as f64)
}

/// Plain dot product between two global video vectors.
pub fn coarse_similarity(a: &[f64], b: &[f64]) -> Result<f64, KernelError> {
    if a.len() != b.len() {
        return Err(KernelError::DimensionMismatch {
            what: "coarse_similarity",
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dot(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{pack_codes, unpack_codes};
    use crate::tensor::{l2_normalize_slice, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_video(id: &str, n: usize, r: usize, d: usize, rng: &mut ChaCha20Rng) -> RegionFeatureTensor {
        let mut values: Vec<f64> = (0..n * r * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for chunk in values.chunks_mut(d) {
            l2_normalize_slice(chunk);
        }
        RegionFeatureTensor::new(id, n, r, d, values).unwrap()
    }

    fn random_codes(id: &str, n: usize, r: usize, bits: usize, rng: &mut ChaCha20Rng) -> BinaryCodeTensor {
        let data: Vec<f64> = (0..n * r * bits)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        pack_codes(id, &Tensor::new(vec![n, r, bits], data).unwrap()).unwrap()
    }

    /// Naive triple-loop oracle for the Chamfer frame-to-frame kernel.
    fn naive_frame_to_frame(q: &RegionFeatureTensor, p: &RegionFeatureTensor) -> Vec<f64> {
        let mut out = vec![0.0; q.frames() * p.frames()];
        for i in 0..q.frames() {
            for k in 0..p.frames() {
                let mut acc = 0.0;
                for j in 0..q.regions() {
                    let mut best = f64::NEG_INFINITY;
                    for l in 0..p.regions() {
                        let mut s = 0.0;
                        for t in 0..q.dim() {
                            s += q.region(i, j)[t] * p.region(k, l)[t];
                        }
                        best = best.max(s);
                    }
                    acc += best;
                }
                out[i * p.frames() + k] = acc / q.regions() as f64;
            }
        }
        out
    }

    #[test]
    fn self_match_attains_unit_diagonal() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let v = random_video("v", 4, 3, 8, &mut rng);
        let m = frame_to_frame(&v, &v).unwrap();
        for i in 0..4 {
            assert!((m.at(i, i) - 1.0).abs() < 1e-6, "diag {}", m.at(i, i));
        }
    }

    #[test]
    fn orthogonal_regions_give_zero() {
        let q = RegionFeatureTensor::new("q", 2, 1, 4, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = RegionFeatureTensor::new("p", 3, 2, 4, {
            let mut v = vec![0.0; 24];
            for r in v.chunks_mut(4) {
                r[1] = 1.0;
            }
            v
        })
        .unwrap();
        let m = frame_to_frame(&q, &p).unwrap();
        assert!(m.values().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn matches_naive_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let q = random_video("q", 2, 3, 8, &mut rng);
        let p = random_video("p", 4, 2, 8, &mut rng);
        let m = frame_to_frame(&q, &p).unwrap();
        let oracle = naive_frame_to_frame(&q, &p);
        for (a, b) in m.values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn frame_permutation_permutes_columns_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let q = random_video("q", 3, 2, 8, &mut rng);
        let p = random_video("p", 5, 2, 8, &mut rng);
        let perm = [4usize, 0, 3, 1, 2];
        let p_perm = p.select_frames(&perm);
        let m = frame_to_frame(&q, &p).unwrap();
        let mp = frame_to_frame(&q, &p_perm).unwrap();
        for i in 0..3 {
            for (new_col, &old_col) in perm.iter().enumerate() {
                assert_eq!(mp.at(i, new_col).to_bits(), m.at(i, old_col).to_bits());
            }
        }
    }

    #[test]
    fn replacing_a_target_frame_with_the_query_frame_never_lowers_its_row() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for trial in 0..50 {
            let q = random_video("q", 3, 2, 6, &mut rng);
            let p = random_video("p", 3, 2, 6, &mut rng);
            let f = trial % 3;
            let mut values = p.values().to_vec();
            let fsz = p.regions() * p.dim();
            values[f * fsz..(f + 1) * fsz].copy_from_slice(&q.values()[f * fsz..(f + 1) * fsz]);
            let p2 = RegionFeatureTensor::new("p2", 3, 2, 6, values).unwrap();
            let before = frame_to_frame(&q, &p).unwrap();
            let after = frame_to_frame(&q, &p2).unwrap();
            for k in 0..3 {
                assert!(after.at(f, k) >= before.at(f, k) - 1e-6);
            }
        }
    }

    #[test]
    fn identical_codes_give_exact_ones() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let c = random_codes("c", 3, 2, 130, &mut rng);
        let m = hamming_frame_to_frame(&c, &c).unwrap();
        for i in 0..3 {
            assert_eq!(m.at(i, i), 1.0);
        }
    }

    #[test]
    fn complementary_codes_give_exact_minus_one() {
        let ones = pack_codes("a", &Tensor::new(vec![1, 1, 7], vec![1.0; 7]).unwrap()).unwrap();
        let negs = pack_codes("b", &Tensor::new(vec![1, 1, 7], vec![-1.0; 7]).unwrap()).unwrap();
        let m = hamming_frame_to_frame(&ones, &negs).unwrap();
        assert_eq!(m.at(0, 0), -1.0);
    }

    #[test]
    fn packed_path_equals_dense_oracle_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for &bits in &[3usize, 64, 512] {
            let qb = random_codes("q", 2, 2, bits, &mut rng);
            let pb = random_codes("p", 3, 2, bits, &mut rng);
            let m = hamming_frame_to_frame(&qb, &pb).unwrap();

            let qd = unpack_codes(&qb);
            let pd = unpack_codes(&pb);
            for i in 0..2 {
                for k in 0..3 {
                    let mut acc = 0.0;
                    for j in 0..2 {
                        let mut best = f64::NEG_INFINITY;
                        for l in 0..2 {
                            let qoff = (i * 2 + j) * bits;
                            let poff = (k * 2 + l) * bits;
                            let mut s = 0.0;
                            for t in 0..bits {
                                s += qd.data()[qoff + t] * pd.data()[poff + t];
                            }
                            best = best.max(s / bits as f64);
                        }
                        acc += best;
                    }
                    assert_eq!(m.at(i, k).to_bits(), (acc / 2.0).to_bits(), "bits={bits}");
                }
            }
        }
    }

    #[test]
    fn video_to_video_saturates_at_the_clamp() {
        let m = SimilarityMatrix::new(2, 2, vec![5.0, 0.0, 0.0, 5.0]);
        assert_eq!(video_to_video(&m).unwrap(), 1.0);
        let m = SimilarityMatrix::new(2, 3, vec![-3.0; 6]);
        assert_eq!(video_to_video(&m).unwrap(), -1.0);
    }

    #[test]
    fn video_to_video_matches_direct_formula() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = SimilarityMatrix::new(4, 6, values.clone());
        let got = video_to_video(&m).unwrap();
        let mut want = 0.0;
        for i in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for j in 0..6 {
                best = best.max(values[i * 6 + j].clamp(-1.0, 1.0));
            }
            want += best / 4.0;
        }
        assert!((got - want).abs() < 1e-7);
    }

    #[test]
    fn video_to_video_ignores_column_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let values: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = SimilarityMatrix::new(4, 5, values.clone());
        let perm = [3usize, 1, 4, 0, 2];
        let permuted: Vec<f64> = (0..4)
            .flat_map(|i| perm.iter().map(move |&j| (i, j)))
            .map(|(i, j)| values[i * 5 + j])
            .collect();
        let mp = SimilarityMatrix::new(4, 5, permuted);
        assert_eq!(video_to_video(&m).unwrap().to_bits(), video_to_video(&mp).unwrap().to_bits());
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let m = SimilarityMatrix::new(0, 0, vec![]);
        assert!(video_to_video(&m).is_err());
        assert!(self_similarity_score(&m).is_err());
    }

    #[test]
    fn self_similarity_is_exactly_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = random_video("x", 5, 3, 8, &mut rng);
        let m = self_similarity_matrix(&x);
        for i in 0..5 {
            for k in 0..5 {
                assert_eq!(m.at(i, k).to_bits(), m.at(k, i).to_bits());
            }
        }
    }

    #[test]
    fn identical_single_regions_give_all_ones() {
        let mut region = vec![0.3, -0.2, 0.9, 0.1];
        l2_normalize_slice(&mut region);
        let values: Vec<f64> = (0..4).flat_map(|_| region.clone()).collect();
        let x = RegionFeatureTensor::new("x", 4, 1, 4, values).unwrap();
        let m = self_similarity_matrix(&x);
        assert!(m.values().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn self_similarity_matches_naive_double_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let x = random_video("x", 3, 2, 8, &mut rng);
        let m = self_similarity_matrix(&x);
        for i in 0..3 {
            for k in 0..3 {
                let mut acc = 0.0;
                for j in 0..2 {
                    for l in 0..2 {
                        acc += dot(x.region(i, j), x.region(k, l));
                    }
                }
                assert!((m.at(i, k) - acc / 4.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn self_similarity_diagonal_is_the_per_frame_gram_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x = random_video("x", 4, 3, 6, &mut rng);
        let m = self_similarity_matrix(&x);
        for f in 0..4 {
            let mut gram_mean = 0.0;
            for j in 0..3 {
                for l in 0..3 {
                    gram_mean += dot(x.region(f, j), x.region(f, l));
                }
            }
            gram_mean /= 9.0;
            assert!((m.at(f, f) - gram_mean).abs() < 1e-6);
        }
    }

    #[test]
    fn self_similarity_score_examples() {
        let m = SimilarityMatrix::new(2, 2, vec![0.5; 4]);
        assert_eq!(self_similarity_score(&m).unwrap(), 0.5);
        let m = SimilarityMatrix::new(2, 2, vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(self_similarity_score(&m).unwrap(), 0.0);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let values: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = SimilarityMatrix::new(5, 5, values.clone());
        let want = values.iter().sum::<f64>() / 25.0;
        assert!((self_similarity_score(&m).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn coarse_similarity_examples() {
        let mut a = vec![0.2, -0.4, 0.6, 0.1];
        l2_normalize_slice(&mut a);
        assert!((coarse_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-7);
        let e0 = [1.0, 0.0];
        let e1 = [0.0, 1.0];
        assert!(coarse_similarity(&e0, &e1).unwrap().abs() < 1e-7);
        assert!(coarse_similarity(&e0, &a).is_err());
    }

    #[test]
    fn batch_kernels_match_the_single_path() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let q = random_video("q", 3, 2, 8, &mut rng);
        let targets: Vec<RegionFeatureTensor> =
            (0..5).map(|i| random_video(&format!("t{i}"), 2 + i % 3, 2, 8, &mut rng)).collect();
        let refs: Vec<&RegionFeatureTensor> = targets.iter().collect();
        let batch = frame_to_frame_many(&q, &refs).unwrap();
        for (p, m) in targets.iter().zip(&batch) {
            assert_eq!(m, &frame_to_frame(&q, p).unwrap());
        }
    }
}
