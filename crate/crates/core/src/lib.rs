//! Small differentiable models plus per-sample and dataset-wise attribution.
//!
//! The crate trains feedforward networks (dense, convolution, batch norm,
//! ReLU/Mish) with reverse-mode gradients, computes per-sample attributions
//! (Integrated Gradients, Baseline Shapley) that satisfy the completeness
//! axiom, and aggregates them into Integrated Gradient Correlation: a
//! per-component decomposition of the Pearson correlation between model
//! predictions and targets.

mod batch;

pub mod attribution;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod idx;
pub mod igc;
pub mod layer;
pub mod model;
pub mod train;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use layer::{ActivationKind, Layer, Padding};
pub use model::{Differentiable, Model, Task};
pub use tensor::Tensor;
