//! Desk-scale laboratory for backdoor-based model watermarking.
//!
//! The crate provides everything needed to embed, attack, and analyze
//! backdoor watermarks on small networks end to end:
//!
//! - [`nn`]: a self-contained differentiable network core with exact
//!   backpropagation, dual-mode BatchNorm, momentum SGD, and parameter-vector
//!   algebra.
//! - [`data`]: a built-in procedural shapes dataset, IDX binary loaders, and
//!   split handling.
//! - [`watermark`]: watermark-sample construction (content / noise /
//!   unrelated) and the WSR/BA metrics.
//! - [`embedders`]: the four training procedures that produce a watermarked
//!   model (vanilla, exponential weighting, noisy-gradient, and adversarial
//!   parametric perturbation with clean-sample BatchNorm).
//! - [`attacks`]: fine-tuning, fine-pruning, and a simplified
//!   perturbation-sensitivity pruning attack.
//! - [`landscape`]: the parameter-space vicinity scan over the adversarial
//!   and fine-tuning directions.
//! - [`config`] / [`experiment`]: the config-driven runner behind the CLI.
//!
//! All randomness flows through explicit seeds; identical configs produce
//! bit-identical artifacts.

pub mod attacks;
pub mod config;
pub mod data;
pub mod embedders;
pub mod error;
pub mod experiment;
pub mod landscape;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod watermark;

pub use error::{Error, Result};
pub use tensor::Tensor;
