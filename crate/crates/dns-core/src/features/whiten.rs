//! PCA whitening and dimensionality reduction for region vectors.

use super::{FeatureError, RegionFeatureTensor};
use crate::tensor::l2_normalize_slice;

/// Eigenvalues below this are treated as rank deficiency; surviving ones are
/// still floored before the inverse square root.
const EIGENVALUE_FLOOR: f64 = 1e-8;

/// Affine map taking raw region vectors to decorrelated, unit-variance
/// coordinates; callers l2-normalize downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    mean: Vec<f64>,
    /// `d_in x d_out`, row-major. Column `j` is eigenvector `j` scaled by
    /// `1/sqrt(eigenvalue_j)`.
    projection: Vec<f64>,
    d_in: usize,
    d_out: usize,
}

impl WhiteningTransform {
    pub fn input_dim(&self) -> usize {
        self.d_in
    }

    pub fn output_dim(&self) -> usize {
        self.d_out
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// `(v - mean) P` without normalization.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.d_in, "input dim mismatch");
        let mut out = vec![0.0; self.d_out];
        for (i, (&x, &m)) in v.iter().zip(&self.mean).enumerate() {
            let c = x - m;
            if c == 0.0 {
                continue;
            }
            let row = &self.projection[i * self.d_out..(i + 1) * self.d_out];
            for (o, &p) in out.iter_mut().zip(row) {
                *o += c * p;
            }
        }
        out
    }

    /// Whitens then l2-normalizes.
    pub fn apply_normalized(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.apply(v);
        l2_normalize_slice(&mut out);
        out
    }

    /// Whitens and normalizes every region vector of a video tensor.
    pub fn whiten_tensor(&self, x: &RegionFeatureTensor) -> RegionFeatureTensor {
        let mut values = Vec::with_capacity(x.frames() * x.regions() * self.d_out);
        for f in 0..x.frames() {
            for r in 0..x.regions() {
                values.extend_from_slice(&self.apply_normalized(x.region(f, r)));
            }
        }
        RegionFeatureTensor::new(x.video_id(), x.frames(), x.regions(), self.d_out, values)
            .expect("whitened dims are valid")
    }
}

/// Fits a whitening transform on sample region vectors: the top `out_dim`
/// principal components scaled to unit variance.
pub fn fit_whitening(sample: &[Vec<f64>], out_dim: usize) -> Result<WhiteningTransform, FeatureError> {
    let n = sample.len();
    let d_in = sample.first().map_or(0, Vec::len);
    if n < out_dim || out_dim == 0 || out_dim > d_in || sample.iter().any(|v| v.len() != d_in) {
        return Err(FeatureError::BadWhiteningSample {
            needed: out_dim.max(1),
            got: n,
            dim: d_in,
            out_dim,
        });
    }

    let mut mean = vec![0.0; d_in];
    for v in sample {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut cov = vec![0.0; d_in * d_in];
    let mut centered = vec![0.0; d_in];
    for v in sample {
        for (c, (&x, &m)) in centered.iter_mut().zip(v.iter().zip(&mean)) {
            *c = x - m;
        }
        for i in 0..d_in {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d_in {
                cov[i * d_in + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d_in {
        for j in i..d_in {
            let v = cov[i * d_in + j] / n as f64;
            cov[i * d_in + j] = v;
            cov[j * d_in + i] = v;
        }
    }

    let (eigvals, eigvecs) = jacobi_eigen(&cov, d_in);
    let mut order: Vec<usize> = (0..d_in).collect();
    order.sort_by(|&a, &b| eigvals[b].total_cmp(&eigvals[a]).then(a.cmp(&b)));

    let mut projection = vec![0.0; d_in * out_dim];
    for (rank, &col) in order.iter().take(out_dim).enumerate() {
        let lambda = eigvals[col];
        if lambda < EIGENVALUE_FLOOR {
            return Err(FeatureError::RankDeficient { index: rank, value: lambda });
        }
        let scale = 1.0 / lambda.max(EIGENVALUE_FLOOR).sqrt();
        for i in 0..d_in {
            projection[i * out_dim + rank] = eigvecs[i * d_in + col] * scale;
        }
    }

    Ok(WhiteningTransform { mean, projection, d_in, d_out: out_dim })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and an eigenvector matrix whose column `j` pairs with
/// eigenvalue `j`.
fn jacobi_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frobenius: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = (frobenius * 1e-14).max(1e-300);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let eigvals: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    (eigvals, v)
}
