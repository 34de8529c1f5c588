//! Dense row-major tensor of 64-bit reals.

use crate::error::{Error, Result};

/// Dense tensor with row-major storage. Rank 0 (empty shape) is a scalar.
///
/// Construction rejects non-finite values, so a `Tensor` always holds
/// finite data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the element count matches the shape
    /// and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor construction",
                expected: vec![expected],
                found: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor construction" });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    /// Rank-1 tensor from a flat vector.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 tensor.
    ///
    /// Panics if the tensor is not a scalar; callers guard on shape first.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Copy with one coordinate displaced; used by finite differences.
    pub fn with_nudged(&self, index: usize, delta: f64) -> Result<Self> {
        let mut data = self.data.clone();
        data[index] += delta;
        Self::new(self.shape.clone(), data)
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_len_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn rejects_non_finite() {
        let err = Tensor::from_vec(vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let err = Tensor::from_vec(vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::scalar(3.5).unwrap();
        assert!(t.is_scalar());
        assert_eq!(t.len(), 1);
        assert_eq!(t.scalar_value(), 3.5);
    }
}
