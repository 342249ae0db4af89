//! Minimal tensor engine with tape-based reverse-mode autodiff.
//!
//! Only the operations needed by coordinate MLPs and small convolutional
//! U-Nets are provided. Matrix products go through `matrixmultiply`;
//! convolutions are lowered to im2col + GEMM per sample, which keeps results
//! independent of batch size.

mod conv;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
mod real;
pub mod tensor;

pub use graph::{Graph, Var};
pub use nn::{Bound, Conv2d, GroupNorm, Linear};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamKey, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, GradError>;
