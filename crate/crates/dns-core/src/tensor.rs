//! Dense row-major tensors used by every numeric component.
//!
//! Values are `f64` throughout the trainable paths; the on-disk formats
//! narrow to `f32` at serialization time.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("cannot reshape {from:?} ({from_len} elements) into {to:?} ({to_len} elements)")]
    ReshapeMismatch {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },
}

/// Number of elements implied by a shape. The empty shape denotes a scalar.
pub fn num_elements(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// A dense tensor: immutable shape, contiguous row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = num_elements(&shape);
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = num_elements(&shape);
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = num_elements(&shape);
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// Marks the tensor as a differentiable leaf when bound to a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires: bool) {
        self.requires_grad = requires;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() called on tensor with {} elements",
            self.data.len()
        );
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let to_len = num_elements(&shape);
        if to_len != self.data.len() {
            return Err(TensorError::ReshapeMismatch {
                from: self.shape.clone(),
                from_len: self.data.len(),
                to: shape,
                to_len,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.shape)
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gaussian tensor with entries drawn from `N(0, std^2)`.
pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
    let n = num_elements(&shape);
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor {
        shape,
        data,
        requires_grad: false,
    }
}

/// Random unit vector, uniform on the sphere.
pub fn rand_unit_vector(dim: usize, rng: &mut impl Rng) -> Tensor {
    loop {
        let t = randn(vec![dim], 1.0, rng);
        let norm = t.l2_norm();
        if norm > 1e-6 {
            return t.map(|v| v / norm);
        }
    }
}

/// Normalizes a slice in place to unit Euclidean norm. Zero vectors are left as-is.
pub fn l2_normalize_slice(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { expected: 6, actual: 5, .. }));
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(4.25);
        assert!(s.shape().is_empty());
        assert_eq!(s.len(), 1);
        assert_eq!(s.item(), 4.25);
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_for(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_for(&[]), Vec::<usize>::new());
    }

    #[test]
    fn reshape_checks_element_count() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.reshaped(vec![2, 2]).unwrap().shape(), &[2, 2]);
        assert!(t.reshaped(vec![3, 2]).is_err());
    }

    #[test]
    fn unit_vector_is_normalized() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let u = rand_unit_vector(16, &mut rng);
        assert!((u.l2_norm() - 1.0).abs() < 1e-12);
    }
}
