//! Core engine for reflection-aware KL-divergence target optimization (RKTO)
//! on toy autoregressive categorical policies.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`numerics`] — scalar/vector primitives (softmax, KL, rescaled cosine,
//!   mask IoU, the softplus importance weight).
//! - [`policy`] — a context-conditioned autoregressive sequence model with
//!   exact log-probabilities and analytic gradients, in a featurized and a
//!   tabular (exactly enumerable) mode.
//! - [`rewards`] — instruction-effectiveness and reflection-quality rewards
//!   plus the differentiable reflection loss.
//! - [`trainer`] — batched log-ratio statistics, the hybrid
//!   surrogate + REINFORCE gradient estimator, the SFT/RKTO schedule, and
//!   the composite-KL monotonicity check.
//! - [`synthdata`] — synthetic preference datasets with a planted teacher
//!   policy, and their file format.
//! - [`evalstats`] — bootstrap confidence intervals, Cohen's and Fleiss'
//!   kappa, and agreement reports.
//! - [`gradcheck`] — finite-difference verification suites used by tests and
//!   the CLI.

pub mod evalstats;
pub mod gradcheck;
pub mod numerics;
pub mod optim;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod synthdata;
pub mod trainer;
