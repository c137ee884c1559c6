//! Dense rank-<=3 tensors with reverse-mode automatic differentiation.
//!
//! Activations use `(B, T, C)` layout: batch, tokens, channels, row-major.
//! Per-channel parameters are `(C,)` and scalars are stored as length-1
//! tensors so the optimizer treats them uniformly.

pub mod counters;
pub mod gradcheck;
pub mod graph;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use gradcheck::{finite_diff_check, finite_diff_check_multi};
pub use graph::{Gradients, Graph, ReduceKind, UnaryKind, Var};

/// Errors surfaced by tensor construction and graph operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid axis {axis} for rank-{rank} tensor")]
    BadAxis { axis: usize, rank: usize },
    #[error("empty reduction axis in {op}")]
    EmptyAxis { op: &'static str },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major f64 tensor, rank 0 is represented as shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 3 {
            return Err(TensorError::Invalid(format!(
                "rank must be 1..=3, got shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Gaussian init with the given std, driven by the caller's seeded RNG.
    pub fn randn<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Single element accessor for scalar tensors.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Population standard deviation over all elements.
    pub fn std_all(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        var.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_rank_above_three() {
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn std_all_of_constant_is_zero() {
        let t = Tensor::full(vec![2, 3], 4.2);
        assert_eq!(t.std_all(), 0.0);
    }
}
