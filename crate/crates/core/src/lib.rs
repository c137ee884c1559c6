//! Dynamic Tanh (DyT) and the normalization layers it replaces, built on a
//! small tape-autodiff tensor core, with a toy Transformer/MLP stack and the
//! training, analysis and benchmarking harnesses around them.

pub mod analysis;
pub mod bench;
pub mod model;
pub mod norm;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, Tensor, TensorError, Var};
