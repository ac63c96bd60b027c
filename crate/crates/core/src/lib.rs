//! Perturbation analysis for small neural networks.
//!
//! The crate trains dense and convolutional classifiers with manual gradients
//! and then measures how much they rely on individual activation-space
//! directions (units or conv feature maps):
//!
//! - [`nn`]: layers with manual gradients, SGD, checkpoints.
//! - [`data`]: IDX / CIFAR-10 binary loaders, label corruption, splits,
//!   synthetic datasets.
//! - [`intervene`]: activation clamping and noise-injection plans consumed by
//!   the forward pass.
//! - [`perturb`]: cumulative ablation curves and variance-scaled noise sweeps.
//! - [`selectivity`]: per-unit class selectivity, mutual information, filter
//!   L1 norms, and importance correlations.
//! - [`modelsel`]: normalized ablation-curve AUC, an early-stopping monitor,
//!   and hyperparameter-sweep ranking.
//!
//! Everything is 64-bit floating point and deterministic given a seed: RNG
//! streams are derived per purpose (see [`rng`]), and parallel code only ever
//! splits work along boundaries that do not change summation order.

pub mod data;
pub mod error;
pub mod intervene;
pub mod io;
pub mod modelsel;
pub mod nn;
pub mod perturb;
pub mod rng;
pub mod selectivity;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
