//! Region-vector hashing. Evaluation applies `sgn(r W)` and packs the codes;
//! training swaps the sign for its expected value under Gaussian input noise,
//! `erf(r W / sqrt(2 sigma^2))`, which is differentiable.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use super::{fetch, fetch_scalar, ModelResult, ParamBindings, TapeResult};
use crate::autodiff::{Tape, Var};
use crate::features::{pack_codes, BinaryCodeTensor, RegionFeatureTensor};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Binarization {
    pub weights: Tensor,
    /// Surrogate noise scale; fixed, never trained.
    pub sigma: f64,
}

pub struct BinarizationVars {
    pub weights: Var,
    pub sigma: f64,
}

impl Binarization {
    /// Random orthonormal block init: pairwise-orthogonal unit columns when
    /// `bits <= dim`, orthonormal rows otherwise.
    pub fn init(dim: usize, bits: usize, sigma: f64, rng: &mut ChaCha20Rng) -> Self {
        let weights = if bits <= dim {
            let cols = crate::features::synth::orthonormal_rows(bits, dim, rng);
            let mut w = vec![0.0; dim * bits];
            for (l, col) in cols.iter().enumerate() {
                for d in 0..dim {
                    w[d * bits + l] = col[d];
                }
            }
            Tensor::new(vec![dim, bits], w).expect("shape")
        } else {
            let rows = crate::features::synth::orthonormal_rows(dim, bits, rng);
            let mut w = vec![0.0; dim * bits];
            for (d, row) in rows.iter().enumerate() {
                w[d * bits..(d + 1) * bits].copy_from_slice(row);
            }
            Tensor::new(vec![dim, bits], w).expect("shape")
        };
        Self { weights, sigma }
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn bits(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn frozen(&self, tape: &Tape) -> BinarizationVars {
        BinarizationVars { weights: tape.constant(self.weights.clone()), sigma: self.sigma }
    }

    pub fn trainable(&self, tape: &Tape, reg: &mut ParamBindings, prefix: &str) -> BinarizationVars {
        BinarizationVars {
            weights: reg.bind(tape, format!("{prefix}.weights"), &self.weights),
            sigma: self.sigma,
        }
    }

    /// Evaluation-mode hashing: packed sign codes. `sgn(0)` maps to +1.
    pub fn binarize_eval(&self, x: &RegionFeatureTensor) -> ModelResult<BinaryCodeTensor> {
        let (d, bits) = (self.dim(), self.bits());
        assert_eq!(x.dim(), d, "feature dim does not match binarization weights");
        let mut codes = Vec::with_capacity(x.frames() * x.regions() * bits);
        for f in 0..x.frames() {
            for r in 0..x.regions() {
                let region = x.region(f, r);
                for l in 0..bits {
                    let mut pre = 0.0;
                    for (t, &v) in region.iter().enumerate() {
                        pre += v * self.weights.data()[t * bits + l];
                    }
                    codes.push(if pre >= 0.0 { 1.0 } else { -1.0 });
                }
            }
        }
        let t = Tensor::new(vec![x.frames(), x.regions(), bits], codes)?;
        Ok(pack_codes(x.video_id(), &t)?)
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weights"), self.weights.clone()),
            (format!("{prefix}.sigma"), Tensor::scalar(self.sigma)),
        ]
    }

    pub fn from_tensors(
        map: &BTreeMap<String, Tensor>,
        prefix: &str,
        dim: usize,
        bits: usize,
    ) -> ModelResult<Self> {
        Ok(Self {
            weights: fetch(map, &format!("{prefix}.weights"), &[dim, bits])?,
            sigma: fetch_scalar(map, &format!("{prefix}.sigma"))?,
        })
    }
}

impl BinarizationVars {
    /// Training-mode hashing: `x [N,R,D]` -> soft codes `[N,R,L]` in (-1, 1).
    pub fn binarize_train(&self, tape: &Tape, x: Var) -> TapeResult<Var> {
        let shape = tape.shape_of(x);
        let (n, r, d) = (shape[0], shape[1], shape[2]);
        let bits = tape.shape_of(self.weights)[1];
        let flat = tape.reshape(x, vec![n * r, d])?;
        let pre = tape.matmul(flat, self.weights)?;
        let scaled = tape.scale(pre, 1.0 / (std::f64::consts::SQRT_2 * self.sigma))?;
        let soft = tape.erf(scaled);
        Ok(tape.reshape(soft, vec![n, r, bits])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::unpack_codes;
    use crate::tensor::l2_normalize_slice;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn unit_video(n: usize, r: usize, d: usize, rng: &mut ChaCha20Rng) -> RegionFeatureTensor {
        let mut values: Vec<f64> = (0..n * r * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in values.chunks_mut(d) {
            l2_normalize_slice(c);
        }
        RegionFeatureTensor::new("x", n, r, d, values).unwrap()
    }

    #[test]
    fn train_mode_maps_zero_preactivation_to_zero() {
        let tape = Tape::new();
        let bin = Binarization {
            weights: Tensor::zeros(vec![3, 4]),
            sigma: DEFAULT_SIGMA,
        };
        let x = tape.constant(Tensor::new(vec![1, 1, 3], vec![0.4, -0.2, 0.9]).unwrap());
        let soft = bin.frozen(&tape).binarize_train(&tape, x).unwrap();
        assert!(tape.value(soft).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn erf_at_one_sigma_matches_the_analytic_value() {
        // Pre-activation mu = sigma gives erf(1/sqrt(2)) ~ 0.6827, the same
        // mass a Gaussian puts within one standard deviation.
        let sigma = DEFAULT_SIGMA;
        let got = libm::erf(sigma / (std::f64::consts::SQRT_2 * sigma));
        assert!((got - 0.682_689_492_137_085_9).abs() < 1e-12);

        // Monte Carlo cross-check: expected sign of N(sigma, sigma^2).
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let n = 1_000_000usize;
        let mut mean = 0.0;
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let x = sigma + sigma * z;
            mean += if x >= 0.0 { 1.0 } else { -1.0 };
        }
        mean /= n as f64;
        let se = (1.0 - got * got).sqrt() / (n as f64).sqrt();
        assert!((mean - got).abs() <= 3.0 * se, "mc {mean} vs erf {got} (se {se:.2e})");
    }

    #[test]
    fn eval_mode_takes_signs() {
        let mut w = Tensor::zeros(vec![2, 2]);
        w.data_mut().copy_from_slice(&[1.0, -1.0, 0.0, 0.0]);
        let bin = Binarization { weights: w, sigma: DEFAULT_SIGMA };
        let x = RegionFeatureTensor::new("x", 1, 1, 2, vec![-0.4, 0.9]).unwrap();
        let packed = bin.binarize_eval(&x).unwrap();
        let codes = unpack_codes(&packed);
        // pre = (-0.4, 0.4) -> signs (-1, +1)
        assert_eq!(codes.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn train_and_eval_agree_away_from_the_boundary() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let bin = Binarization::init(8, 16, DEFAULT_SIGMA, &mut rng);
        let x = unit_video(2, 2, 8, &mut rng);

        let tape = Tape::new();
        let xv = tape.constant(x.to_tensor());
        let soft = bin.frozen(&tape).binarize_train(&tape, xv).unwrap();
        let soft = tape.value(soft);
        let hard = unpack_codes(&bin.binarize_eval(&x).unwrap());

        for (f, r, l, (&s, &h)) in soft
            .data()
            .iter()
            .zip(hard.data())
            .enumerate()
            .map(|(i, p)| (i / 32, (i / 16) % 2, i % 16, p))
        {
            // Entries with |pre| > 3 sigma must already saturate to the sign.
            if s.abs() > libm::erf(3.0 / std::f64::consts::SQRT_2) {
                assert_eq!(s.signum(), h, "({f},{r},{l})");
            }
        }
    }

    #[test]
    fn surrogate_approaches_the_sign_as_sigma_shrinks() {
        for &x in &[0.3f64, -0.05, 1.2, -2.0] {
            let sigma = x.abs() / 10.0;
            let soft = libm::erf(x / (std::f64::consts::SQRT_2 * sigma));
            assert!((soft - x.signum()).abs() <= 1e-6, "x={x}");
        }
    }

    #[test]
    fn orthonormal_init_preserves_geometry() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let bin = Binarization::init(8, 4, DEFAULT_SIGMA, &mut rng);
        // Columns must be orthonormal when bits <= dim.
        for a in 0..4 {
            for b in 0..4 {
                let mut d = 0.0;
                for t in 0..8 {
                    d += bin.weights.data()[t * 4 + a] * bin.weights.data()[t * 4 + b];
                }
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
    }
}
