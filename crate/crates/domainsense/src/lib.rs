//! Covariance-based parameter sensitivity analysis and domain-sensitive
//! regularization for small, fully differentiable models.
//!
//! The crate answers two questions about a trained (or training) model:
//!
//! 1. *How much does each parameter matter?*  Small perturbations of inputs
//!    and parameters propagate to the output through the model's Jacobians.
//!    With uncorrelated per-parameter variances, the induced output variance
//!    splits into one non-negative contribution per parameter, which yields a
//!    per-parameter sensitivity index.
//! 2. *Does a parameter matter for the same reason everywhere?*  Computing
//!    the index separately per data domain and comparing across domains
//!    exposes parameters whose influence is domain-dependent.  The
//!    coefficient of variation of the per-domain indices weights a
//!    squared-gradient penalty that discourages reliance on such parameters
//!    during training.
//!
//! Module layout, bottom up:
//!
//! - [`tensor`]: a dense row-major `f64` tensor, the single value carrier.
//! - [`tape`]: reverse-mode automatic differentiation on an append-only
//!   tape; backward sweeps emit tape nodes, so gradients are themselves
//!   differentiable (Hessian-vector products by double backward).
//! - [`params`]: a flat parameter vector with a named segment registry and
//!   per-parameter variances.
//! - [`models`]: small multi-layer perceptrons built on the tape, with
//!   mean-squared-error and fused softmax cross-entropy heads.
//! - [`data`]: multi-domain datasets — a two-branch synthetic generator
//!   (invariant + spurious features), CSV persistence, leave-one-domain-out
//!   splits.
//! - [`sensitivity`]: covariance propagation, per-parameter decomposition,
//!   sensitivity indices, empirical Fisher diagonals, per-domain indices and
//!   cross-domain statistics.
//! - [`validate`]: independent oracles (finite differences, straight-line
//!   reference evaluators, Monte-Carlo estimators) packaged as a pass/fail
//!   check suite.  Test-only paths; never used by training.
//! - [`trainer`]: the regularized training loop, coefficient refresh
//!   schedule, and the ablation suite.
//! - [`config`] and [`cli`]: experiment configuration files and the
//!   `generate` / `train` / `validate` / `ablate` commands.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod params;
pub mod sensitivity;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod validate;

pub use error::{Error, Result};
