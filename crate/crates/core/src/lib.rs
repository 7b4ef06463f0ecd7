//! Structured-sparsity training toolkit: a small f64 tensor core with
//! reverse-mode differentiation, LeNet-style models, group regularizers, and
//! a penalty-decomposition trainer that drives exact elementwise hard
//! thresholding alongside stochastic gradient updates.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod regularizers;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
