//! Core library for `debias-lab`: a desk-scale laboratory for studying and
//! mitigating shortcut learning on synthetic bias-imbalanced datasets.
//!
//! The crate is organized around the stages of a debiasing experiment:
//!
//! - [`datagen`] — synthetic two-channel Gaussian datasets where a "bias"
//!   feature is deliberately easier to learn than the target feature, plus
//!   the canonical CSV format.
//! - [`model`] — a small ReLU multi-layer perceptron with explicit forward
//!   and backward passes and lossless JSON checkpoints.
//! - [`losses`] — cross entropy, generalized cross entropy, and the
//!   bias-balanced softmax loss driven by per-bias-class target priors.
//! - [`metrics`] — ROC curves, AUC, the Youden-optimal threshold, and
//!   group-wise AUC reports (aligned / conflicting / balanced / overall).
//! - [`trainer`] — a deterministic mini-batch Adam training loop with
//!   validation-AUC checkpoint selection.
//! - [`pbbl`] — pseudo-bias balanced learning: iterative bias capture with
//!   GCE, ROC-threshold pseudo-bias assignment, prior estimation, and the
//!   final debiased training run.
//!
//! With the default `parallel` feature the data-parallel inner loops (batch
//! forward/backward, scoring, generation) run on rayon; without it they fall
//! back to sequential loops that produce bit-identical results.

pub mod datagen;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod pbbl;
pub mod trainer;

pub(crate) mod par;
pub(crate) mod seed;

pub use error::{Error, Result};
pub use matrix::Matrix;
