//! Structured channel pruning for small convolutional encoder-decoder
//! networks.
//!
//! The crate bundles everything the pipeline needs:
//!
//! - [`tensor`] / [`ops`]: dense NCHW tensors with tape-based reverse-mode
//!   differentiation (f32 for training, f64 for gradient checks);
//! - [`layers`]: network graphs, masked batch norm with a learnable prune
//!   threshold, depthwise-separable blocks and hourglass assembly;
//! - [`pruning`]: sparsity-regularized soft pruning, dependency-aware hard
//!   pruning and fine-tuning;
//! - [`complexity`]: exact parameter and MAC accounting;
//! - [`data`] / [`config`] / [`checkpoint`] / [`pipeline`]: the synthetic
//!   denoising task and the stage drivers behind the `slimnet` CLI.

pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{real, GradStore, Real, Tape, Tensor, TensorId};
