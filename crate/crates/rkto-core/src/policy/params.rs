//! Policy parameters, frozen snapshots, and the checkpoint file format.

use super::trace::Token;
use super::PolicyError;
use crate::rng::{self, TAG_POLICY_INIT};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_VERSION: &str = "rkto-policy/1";

/// Parameter layout of a policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PolicyShape {
    /// Logits linear in the parameters over
    /// `[context features | prev-token encoding | position encoding]`.
    /// Both encodings are fixed sinusoidal features of dimension `embed_dim`.
    Featurized { ctx_dim: usize, embed_dim: usize },
    /// One logit row per (context class, position); the conditional at each
    /// position is independent of previous tokens, so the sequence
    /// distribution factorizes position-wise.
    Tabular {
        n_classes: usize,
        max_positions: usize,
    },
}

impl PolicyShape {
    pub fn param_count(&self, vocab: usize) -> usize {
        match *self {
            PolicyShape::Featurized { ctx_dim, embed_dim } => {
                vocab * (ctx_dim + 2 * embed_dim) + vocab
            }
            PolicyShape::Tabular {
                n_classes,
                max_positions,
            } => n_classes * max_positions * vocab,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Seeded { seed: u64, scale: f64 },
}

/// Trainable policy parameters stored as a flat `f64` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyParamsRepr", into = "PolicyParamsRepr")]
pub struct PolicyParams {
    vocab: usize,
    shape: PolicyShape,
    theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyParamsRepr {
    vocab: usize,
    shape: PolicyShape,
    theta: Vec<f64>,
}

impl TryFrom<PolicyParamsRepr> for PolicyParams {
    type Error = String;
    fn try_from(r: PolicyParamsRepr) -> Result<Self, String> {
        PolicyParams::new(r.vocab, r.shape, r.theta).map_err(|e| e.to_string())
    }
}

impl From<PolicyParams> for PolicyParamsRepr {
    fn from(p: PolicyParams) -> Self {
        PolicyParamsRepr {
            vocab: p.vocab,
            shape: p.shape,
            theta: p.theta,
        }
    }
}

impl PolicyParams {
    pub fn new(vocab: usize, shape: PolicyShape, theta: Vec<f64>) -> Result<Self, PolicyError> {
        if vocab == 0 {
            return Err(PolicyError::InvalidInput("vocab must be positive".into()));
        }
        let expected = shape.param_count(vocab);
        if theta.len() != expected {
            return Err(PolicyError::InvalidInput(format!(
                "expected {expected} parameters, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::InvalidInput(
                "parameters must be finite".into(),
            ));
        }
        Ok(Self {
            vocab,
            shape,
            theta,
        })
    }

    pub fn featurized(
        vocab: usize,
        ctx_dim: usize,
        embed_dim: usize,
        init: Init,
    ) -> Result<Self, PolicyError> {
        let shape = PolicyShape::Featurized { ctx_dim, embed_dim };
        let theta = init_theta(shape.param_count(vocab), init);
        Self::new(vocab, shape, theta)
    }

    pub fn tabular(
        vocab: usize,
        n_classes: usize,
        max_positions: usize,
        init: Init,
    ) -> Result<Self, PolicyError> {
        let shape = PolicyShape::Tabular {
            n_classes,
            max_positions,
        };
        let theta = init_theta(shape.param_count(vocab), init);
        Self::new(vocab, shape, theta)
    }

    /// Tabular policy whose conditional at every (class, position) equals
    /// the given probability row (logits set to `ln p`, floored for zeros).
    pub fn tabular_from_probs(
        vocab: usize,
        n_classes: usize,
        max_positions: usize,
        rows: &[Vec<f64>],
    ) -> Result<Self, PolicyError> {
        if rows.len() != n_classes * max_positions {
            return Err(PolicyError::InvalidInput(format!(
                "expected {} probability rows, got {}",
                n_classes * max_positions,
                rows.len()
            )));
        }
        let mut theta = Vec::with_capacity(rows.len() * vocab);
        for row in rows {
            if row.len() != vocab {
                return Err(PolicyError::InvalidInput(
                    "probability row length must equal vocab".into(),
                ));
            }
            for &p in row {
                theta.push(p.max(1e-300).ln());
            }
        }
        Self::new(
            vocab,
            PolicyShape::Tabular {
                n_classes,
                max_positions,
            },
            theta,
        )
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn check_token(&self, token: Token) -> Result<(), PolicyError> {
        if (token as usize) < self.vocab {
            Ok(())
        } else {
            Err(PolicyError::OutOfVocabulary {
                token,
                vocab: self.vocab,
            })
        }
    }

    /// Hash of the structural configuration (not the parameter values),
    /// embedded in checkpoints so resumed runs can detect config drift.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(CHECKPOINT_VERSION.as_bytes());
        hasher.update(self.vocab.to_le_bytes());
        match self.shape {
            PolicyShape::Featurized { ctx_dim, embed_dim } => {
                hasher.update(b"featurized");
                hasher.update(ctx_dim.to_le_bytes());
                hasher.update(embed_dim.to_le_bytes());
            }
            PolicyShape::Tabular {
                n_classes,
                max_positions,
            } => {
                hasher.update(b"tabular");
                hasher.update(n_classes.to_le_bytes());
                hasher.update(max_positions.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Freezes a deep copy of the current parameters.
    pub fn snapshot(&self, step: u64) -> PolicySnapshot {
        PolicySnapshot {
            params: self.clone(),
            step,
        }
    }
}

fn init_theta(n: usize, init: Init) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Seeded { seed, scale } => {
            let mut rng = rng::stream_rng(seed, &[TAG_POLICY_INIT]);
            let mut theta = vec![0.0; n];
            rng::fill_standard_normal(&mut rng, &mut theta);
            for t in theta.iter_mut() {
                *t *= scale;
            }
            theta
        }
    }
}

/// An immutable copy of policy parameters taken at a given step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    params: PolicyParams,
    step: u64,
}

impl PolicySnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    config_hash: String,
    step: u64,
    params: PolicyParams,
}

/// Writes a versioned policy checkpoint. JSON floats use shortest
/// round-trip formatting, so reading it back is bit-exact.
pub fn save_checkpoint(params: &PolicyParams, step: u64, path: &Path) -> Result<(), PolicyError> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION.to_string(),
        config_hash: params.config_hash(),
        step,
        params: params.clone(),
    };
    let bytes = serde_json::to_vec(&file)
        .map_err(|e| PolicyError::Format(format!("serialize checkpoint: {e}")))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, u64), PolicyError> {
    let bytes = std::fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| PolicyError::Format(format!("parse checkpoint: {e}")))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(PolicyError::Format(format!(
            "checkpoint version {} not supported (expected {})",
            file.version, CHECKPOINT_VERSION
        )));
    }
    if file.config_hash != file.params.config_hash() {
        return Err(PolicyError::Format(
            "checkpoint config hash does not match its parameters".into(),
        ));
    }
    Ok((file.params, file.step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn snapshots_of_same_params_serialize_identically() {
        let p = PolicyParams::featurized(4, 2, 3, Init::Seeded { seed: 9, scale: 0.1 }).unwrap();
        let a = serde_json::to_vec(&p.snapshot(5)).unwrap();
        let b = serde_json::to_vec(&p.snapshot(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let p = PolicyParams::featurized(6, 3, 4, Init::Seeded { seed: 1, scale: 0.7 }).unwrap();
        save_checkpoint(&p, 17, &path).unwrap();
        let (q, step) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 17);
        assert_eq!(p.theta(), q.theta());
        assert_eq!(p, q);
        // Second write produces identical bytes.
        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&p, 17, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_version() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let p = PolicyParams::tabular(5, 2, 3, Init::Zeros).unwrap();
        save_checkpoint(&p, 0, &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace(CHECKPOINT_VERSION, "rkto-policy/0");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(PolicyError::Format(_))
        ));
    }

    #[test]
    fn tabular_from_probs_reproduces_rows() {
        let p =
            PolicyParams::tabular_from_probs(2, 1, 1, &[vec![0.9, 0.1]]).unwrap();
        let theta = p.theta();
        let z = crate::numerics::log_sum_exp(theta);
        assert!((theta[0] - z - 0.9f64.ln()).abs() < 1e-12);
        assert!((theta[1] - z - 0.1f64.ln()).abs() < 1e-12);
    }
}
