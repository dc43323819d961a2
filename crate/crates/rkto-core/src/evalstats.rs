//! Evaluation statistics: stratified sampling, percentile-bootstrap
//! confidence intervals, Cohen's and Fleiss' kappa, and agreement reports
//! over binary judgment tables.

use crate::rng::{self, TAG_BOOTSTRAP, TAG_STRATIFIED};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const JUDGMENTS_FORMAT_VERSION: &str = "rkto-judgments/1";

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("insufficient stratum population: {0}")]
    Capacity(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary YES/NO judgments: rows are examples, columns are raters.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgmentTable {
    raters: Vec<String>,
    rows: Vec<JudgmentRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgmentRow {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stratum: Option<String>,
    pub cells: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JudgmentHeader {
    version: String,
    raters: Vec<String>,
}

impl JudgmentTable {
    pub fn new(raters: Vec<String>, rows: Vec<JudgmentRow>) -> Result<Self, StatsError> {
        if raters.is_empty() {
            return Err(StatsError::InvalidInput("table needs at least one rater".into()));
        }
        if rows.is_empty() {
            return Err(StatsError::InvalidInput("table has no rows".into()));
        }
        for row in &rows {
            if row.cells.len() != raters.len() {
                return Err(StatsError::DimensionMismatch {
                    left: row.cells.len(),
                    right: raters.len(),
                });
            }
        }
        Ok(Self { raters, rows })
    }

    pub fn raters(&self) -> &[String] {
        &self.raters
    }

    pub fn rows(&self) -> &[JudgmentRow] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column(&self, rater: usize) -> Vec<bool> {
        self.rows.iter().map(|r| r.cells[rater]).collect()
    }

    /// Newline-delimited JSON: a versioned header line naming the raters,
    /// then one row per example keyed by example id.
    pub fn write(&self, path: &Path) -> Result<(), StatsError> {
        let mut body = serde_json::to_string(&JudgmentHeader {
            version: JUDGMENTS_FORMAT_VERSION.to_string(),
            raters: self.raters.clone(),
        })
        .map_err(|e| StatsError::Format(e.to_string()))?;
        body.push('\n');
        for row in &self.rows {
            body.push_str(
                &serde_json::to_string(row).map_err(|e| StatsError::Format(e.to_string()))?,
            );
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, StatsError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header_line) = lines
            .next()
            .ok_or_else(|| StatsError::Format("empty judgments file".into()))?;
        let header: JudgmentHeader = serde_json::from_str(header_line)
            .map_err(|e| StatsError::Parse {
                line: 1,
                message: e.to_string(),
            })?;
        if header.version != JUDGMENTS_FORMAT_VERSION {
            return Err(StatsError::Format(format!(
                "judgments version {} not supported (expected {})",
                header.version, JUDGMENTS_FORMAT_VERSION
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: JudgmentRow = serde_json::from_str(line).map_err(|e| StatsError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        Self::new(header.raters, rows)
    }
}

/// Seeded sampling without replacement of `counts[stratum]` members per
/// stratum. Returns indices into the pool, grouped by stratum name order.
pub fn stratified_sample(
    strata: &[String],
    counts: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<Vec<usize>, StatsError> {
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        members.entry(s.as_str()).or_default().push(i);
    }
    let mut out = Vec::new();
    for (stratum_idx, (name, want)) in counts.iter().enumerate() {
        let pool = members.get(name.as_str()).cloned().unwrap_or_default();
        if pool.len() < *want {
            return Err(StatsError::Capacity(format!(
                "stratum {name} has {} members, need {want}",
                pool.len()
            )));
        }
        let mut shuffled = pool;
        let mut stratum_rng = rng::stream_rng(seed, &[TAG_STRATIFIED, stratum_idx as u64]);
        rng::shuffle(&mut stratum_rng, &mut shuffled);
        out.extend_from_slice(&shuffled[..*want]);
    }
    Ok(out)
}

/// Linear-interpolation percentile of a sorted slice.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Percentile bootstrap of the mean of a binary outcome vector:
/// `resamples` seeded resamples with replacement, interval at the
/// `(1-level)/2` and `1-(1-level)/2` empirical percentiles.
pub fn bootstrap_ci(
    outcomes: &[bool],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64, f64), StatsError> {
    if outcomes.is_empty() {
        return Err(StatsError::InvalidInput("empty outcome vector".into()));
    }
    if resamples == 0 {
        return Err(StatsError::InvalidInput("resamples must be at least 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::InvalidInput("level must be in (0, 1)".into()));
    }
    let n = outcomes.len();
    let mean = outcomes.iter().filter(|&&o| o).count() as f64 / n as f64;
    let mut means = Vec::with_capacity(resamples);
    for r in 0..resamples {
        let mut resample_rng = rng::stream_rng(seed, &[TAG_BOOTSTRAP, r as u64]);
        let mut hits = 0usize;
        for _ in 0..n {
            if outcomes[rng::uniform_index(&mut resample_rng, n)] {
                hits += 1;
            }
        }
        means.push(hits as f64 / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tail = (1.0 - level) / 2.0;
    let lo = percentile_sorted(&means, tail);
    let hi = percentile_sorted(&means, 1.0 - tail);
    Ok((mean, lo, hi))
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)` with per-rater marginal chance
/// agreement. The degenerate `p_e = 1` case returns 1 for identical raters
/// and 0 otherwise.
pub fn cohen_kappa(r1: &[bool], r2: &[bool]) -> Result<f64, StatsError> {
    if r1.len() != r2.len() {
        return Err(StatsError::DimensionMismatch {
            left: r1.len(),
            right: r2.len(),
        });
    }
    if r1.is_empty() {
        return Err(StatsError::InvalidInput("empty rater vectors".into()));
    }
    let n = r1.len() as f64;
    let p_o = r1.iter().zip(r2).filter(|(a, b)| a == b).count() as f64 / n;
    let m1 = r1.iter().filter(|&&v| v).count() as f64 / n;
    let m2 = r2.iter().filter(|&&v| v).count() as f64 / n;
    let p_e = m1 * m2 + (1.0 - m1) * (1.0 - m2);
    if p_e >= 1.0 - 1e-12 {
        return Ok(if r1 == r2 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Fleiss' kappa over an examples-by-categories count matrix where every
/// row sums to `n_raters`. A single ever-used category is degenerate
/// (`P_e = 1`) and returns 1 by convention.
pub fn fleiss_kappa(counts: &[Vec<usize>], n_raters: usize) -> Result<f64, StatsError> {
    if counts.is_empty() {
        return Err(StatsError::InvalidInput("empty count matrix".into()));
    }
    if n_raters < 2 {
        return Err(StatsError::InvalidInput("need at least two raters".into()));
    }
    let k = counts[0].len();
    if k == 0 {
        return Err(StatsError::InvalidInput("no categories".into()));
    }
    for (i, row) in counts.iter().enumerate() {
        if row.len() != k {
            return Err(StatsError::DimensionMismatch {
                left: row.len(),
                right: k,
            });
        }
        let sum: usize = row.iter().sum();
        if sum != n_raters {
            return Err(StatsError::InvalidInput(format!(
                "row {i} sums to {sum}, expected {n_raters}"
            )));
        }
    }
    let n = counts.len() as f64;
    let m = n_raters as f64;
    let p_bar: f64 = counts
        .iter()
        .map(|row| {
            let sq: usize = row.iter().map(|&c| c * c).sum();
            (sq as f64 - m) / (m * (m - 1.0))
        })
        .sum::<f64>()
        / n;
    let p_e: f64 = (0..k)
        .map(|j| {
            let col: usize = counts.iter().map(|row| row[j]).sum();
            let p_j = col as f64 / (n * m);
            p_j * p_j
        })
        .sum();
    if p_e >= 1.0 - 1e-12 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapOpts {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapOpts {
    fn default() -> Self {
        Self {
            resamples: 10_000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterSummary {
    pub name: String,
    pub accuracy: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub kappa_vs_reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n_rows: usize,
    pub reference: String,
    pub per_rater: Vec<RaterSummary>,
    pub kappa_matrix: Vec<Vec<f64>>,
    pub fleiss_kappa: f64,
    /// Majority vote per row; ties with even rater counts resolve to NO.
    pub majority: Vec<bool>,
    pub majority_accuracy: f64,
}

/// Per-rater accuracy against a reference column with bootstrap intervals,
/// the pairwise kappa matrix, Fleiss' kappa, and the majority-vote column.
pub fn agreement_report(
    table: &JudgmentTable,
    reference_column: usize,
    opts: &BootstrapOpts,
) -> Result<AgreementReport, StatsError> {
    let r = table.raters().len();
    if r < 2 {
        return Err(StatsError::InvalidInput(
            "agreement report needs at least two raters".into(),
        ));
    }
    if reference_column >= r {
        return Err(StatsError::InvalidInput(format!(
            "reference column {reference_column} out of range ({r} raters)"
        )));
    }
    let columns: Vec<Vec<bool>> = (0..r).map(|i| table.column(i)).collect();
    let reference = &columns[reference_column];

    let mut per_rater = Vec::with_capacity(r);
    for (i, col) in columns.iter().enumerate() {
        let outcomes: Vec<bool> = col
            .iter()
            .zip(reference)
            .map(|(a, b)| a == b)
            .collect();
        let accuracy = outcomes.iter().filter(|&&o| o).count() as f64 / outcomes.len() as f64;
        let (_, lo, hi) = bootstrap_ci(
            &outcomes,
            opts.resamples,
            opts.level,
            rng::mix64(opts.seed ^ i as u64),
        )?;
        per_rater.push(RaterSummary {
            name: table.raters()[i].clone(),
            accuracy,
            ci_lo: lo,
            ci_hi: hi,
            kappa_vs_reference: cohen_kappa(col, reference)?,
        });
    }

    let mut kappa_matrix = vec![vec![0.0; r]; r];
    for i in 0..r {
        for j in 0..r {
            kappa_matrix[i][j] = cohen_kappa(&columns[i], &columns[j])?;
        }
    }

    let counts: Vec<Vec<usize>> = table
        .rows()
        .iter()
        .map(|row| {
            let yes = row.cells.iter().filter(|&&v| v).count();
            vec![yes, r - yes]
        })
        .collect();
    let fleiss = fleiss_kappa(&counts, r)?;

    let majority: Vec<bool> = table
        .rows()
        .iter()
        .map(|row| {
            let yes = row.cells.iter().filter(|&&v| v).count();
            2 * yes > r
        })
        .collect();
    let majority_accuracy = majority
        .iter()
        .zip(reference)
        .filter(|(a, b)| a == b)
        .count() as f64
        / majority.len() as f64;

    Ok(AgreementReport {
        n_rows: table.n_rows(),
        reference: table.raters()[reference_column].clone(),
        per_rater,
        kappa_matrix,
        fleiss_kappa: fleiss,
        majority,
        majority_accuracy,
    })
}

/// Flat tab-separated view of the per-rater summaries, for plotting.
pub fn report_tsv(report: &AgreementReport) -> String {
    let mut out = String::from("rater\taccuracy\tci_lo\tci_hi\tkappa_vs_reference\n");
    for r in &report.per_rater {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.name, r.accuracy, r.ci_lo, r.ci_hi, r.kappa_vs_reference
        ));
    }
    out.push_str(&format!(
        "majority\t{}\t\t\t\nfleiss_kappa\t{}\t\t\t\n",
        report.majority_accuracy, report.fleiss_kappa
    ));
    out
}
