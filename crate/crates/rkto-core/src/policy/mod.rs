//! Context-conditioned autoregressive categorical sequence model.
//!
//! A trace is a short structured generation split into thinking /
//! intermediate / reflection / output segments plus an optional fixed-length
//! mask-token block. The policy assigns exact log-probabilities to traces,
//! exposes analytic gradients of those log-probabilities, samples traces
//! ancestrally, and supports frozen reference snapshots.
//!
//! Two parameterizations exist:
//!
//! - `Featurized`: logits are linear in the parameters over a concatenation
//!   of context features, a fixed previous-token encoding, and a sinusoidal
//!   position encoding. Gradients are closed-form.
//! - `Tabular`: one logit row per (context class, position), independent of
//!   the previous token, so sequence-level KL divergences are exactly
//!   computable. Used by the alignment-theorem checks.

mod model;
mod params;
mod trace;

pub use model::{
    decode_mask, exact_kl_to, grad_log_prob, grad_log_prob_segment, log_prob, sample,
    segment_predictive_dist, sft_loss_and_grad, tabular_segment_kl, teacher_forced_dists,
    LogProb,
};
pub(crate) use model::accumulate_logit_grads as model_accumulate;
pub use params::{
    load_checkpoint, save_checkpoint, Init, PolicyParams, PolicyShape, PolicySnapshot,
    CHECKPOINT_VERSION,
};
pub use trace::{vocab, Context, SegmentKind, SegmentPlan, Token, Trace};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("token {token} out of vocabulary (size {vocab})")]
    OutOfVocabulary { token: Token, vocab: usize },
    #[error("mask decode failed: {0}")]
    Decode(String),
    #[error("enumeration budget exceeded: {0} sequences")]
    Capacity(u128),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
