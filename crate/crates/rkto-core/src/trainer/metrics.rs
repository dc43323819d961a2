//! The per-step metrics record. One record per optimizer or evaluation
//! step, serialized as newline-delimited JSON; reruns with identical
//! configuration and seed produce byte-identical logs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Sft,
    Rkto,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: Phase,
    pub epoch: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sft_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub j_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eta0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_r_eff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_r_reflect: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub b_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl_composite: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl Default for Phase {
    fn default() -> Self {
        Phase::Sft
    }
}

impl MetricsRecord {
    pub fn to_ndjson_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("metrics record serializes");
        s.push('\n');
        s
    }
}
