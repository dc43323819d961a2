//! Deterministic scalar/vector primitives shared by every other module:
//! softmax, KL divergence, rescaled cosine similarity, mask IoU, and the
//! clipped-softplus importance weight.
//!
//! Everything here is pure, reentrant, and computed in `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to the second argument of the KL divergence before the log.
/// Model distributions are softmax outputs and can underflow to zero.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector passed to cosine similarity")]
    ZeroVector,
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
}

/// A probability distribution over a finite support.
///
/// Entries are non-negative and sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, NumericsError> {
        if probs.is_empty() {
            return Err(NumericsError::Empty("probability vector"));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(NumericsError::InvalidDistribution(format!(
                    "entry {i} is {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(NumericsError::InvalidDistribution(format!(
                "sum is {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self, NumericsError> {
        if n == 0 {
            return Err(NumericsError::Empty("support"));
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// A square binary mask with `side * side` cells in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskGridRepr", into = "MaskGridRepr")]
pub struct MaskGrid {
    side: usize,
    cells: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskGridRepr {
    side: usize,
    cells: Vec<u8>,
}

impl TryFrom<MaskGridRepr> for MaskGrid {
    type Error = String;
    fn try_from(r: MaskGridRepr) -> Result<Self, String> {
        MaskGrid::new(r.side, r.cells).map_err(|e| e.to_string())
    }
}

impl From<MaskGrid> for MaskGridRepr {
    fn from(m: MaskGrid) -> Self {
        MaskGridRepr {
            side: m.side,
            cells: m.cells,
        }
    }
}

impl MaskGrid {
    pub fn new(side: usize, cells: Vec<u8>) -> Result<Self, NumericsError> {
        if side == 0 {
            return Err(NumericsError::InvalidMask("side must be positive".into()));
        }
        if cells.len() != side * side {
            return Err(NumericsError::InvalidMask(format!(
                "expected {} cells, got {}",
                side * side,
                cells.len()
            )));
        }
        if let Some(&c) = cells.iter().find(|&&c| c > 1) {
            return Err(NumericsError::InvalidMask(format!(
                "cell value {c} not in {{0,1}}"
            )));
        }
        Ok(Self { side, cells })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn popcount(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }
}

/// A fixed-dimension real embedding vector.
///
/// Vectors produced by the rewards module are unit L2-norm within 1e-9;
/// the type itself only requires finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVec {
    values: Vec<f64>,
}

impl EmbeddingVec {
    pub fn new(values: Vec<f64>) -> Result<Self, NumericsError> {
        if values.is_empty() {
            return Err(NumericsError::Empty("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite("embedding entry"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Numerically stable softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Result<ProbDist, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::Empty("logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite("logit"));
    }
    let mut probs = vec![0.0; logits.len()];
    softmax_into(logits, &mut probs);
    Ok(ProbDist { probs })
}

/// In-place softmax over pre-validated finite logits. Internal hot path.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log-sum-exp with max-subtraction, used for log-softmax normalizers.
pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

/// KL divergence `sum p log(p/q)` over a common support.
///
/// Entries of `q` are floored at [`KL_FLOOR`] before the log so that
/// underflowed softmax outputs do not produce infinities.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64, NumericsError> {
    if p.len() != q.len() {
        return Err(NumericsError::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(kl_raw(p.probs(), q.probs()))
}

/// KL over raw slices, assumed same length and individually normalized.
pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            kl += pi * (pi.ln() - qi.max(KL_FLOOR).ln());
        }
    }
    kl
}

/// Cosine similarity rescaled to `[0,1]`: `(1 + cos(a,b)) / 2`.
pub fn cos_rescaled(a: &EmbeddingVec, b: &EmbeddingVec) -> Result<f64, NumericsError> {
    if a.dim() != b.dim() {
        return Err(NumericsError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::ZeroVector);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok((1.0 + cos) / 2.0)
}

/// Intersection-over-union between two binary masks of equal side.
///
/// Two empty masks have IoU 1: an empty prediction perfectly matches an
/// empty reference.
pub fn iou(a: &MaskGrid, b: &MaskGrid) -> Result<f64, NumericsError> {
    if a.side() != b.side() {
        return Err(NumericsError::DimensionMismatch {
            left: a.side(),
            right: b.side(),
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.cells().iter().zip(b.cells()) {
        if x == 1 && y == 1 {
            inter += 1;
        }
        if x == 1 || y == 1 {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Stable `softplus(s) = ln(1 + e^s)`.
pub fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Monotonic importance weight `clip(softplus(s), 0, w_max)`.
pub fn weight_fn(s: f64, w_max: f64) -> Result<f64, NumericsError> {
    if !s.is_finite() {
        return Err(NumericsError::NonFinite("weight argument"));
    }
    if !(w_max > 0.0) {
        return Err(NumericsError::InvalidDistribution(
            "w_max must be positive".into(),
        ));
    }
    Ok(softplus(s).clamp(0.0, w_max))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
