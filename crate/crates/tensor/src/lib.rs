//! Small dense tensor library with tape-based reverse-mode autodiff.
//!
//! Everything needed to train transformer encoders, prefixes and classifier
//! heads on the CPU: batched matmul, softmax, layer norm, cross entropy,
//! embedding lookup, shape plumbing, Adam, and a finite-difference checker.
//! Recording and backward are single-threaded; a [`Graph`] is built per step
//! and discarded.

pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
mod ops;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
