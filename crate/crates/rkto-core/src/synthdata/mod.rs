//! Synthetic preference datasets with a planted teacher policy.
//!
//! Each dataset draws contexts from a small set of abstract categories
//! (mirroring a reference/original media mixture as context classes only),
//! plants a tabular teacher that defines the preferred distribution per
//! class, samples preferred traces from it, and derives reference masks
//! from a thresholded linear projection of the context features. A
//! configured fraction of examples is labeled non-desired by corrupting the
//! reflection segment and flipping a quarter of the trace's mask cells;
//! those examples are reserved for evaluation-statistics exercises.

mod io;

pub use io::{manifest_path_for, read_dataset, write_dataset};

use crate::numerics::{MaskGrid, NumericsError};
use crate::policy::{
    vocab, Context, PolicyError, PolicyParams, SegmentKind, SegmentPlan, Token, Trace,
};
use crate::rng::{
    self, TAG_GEN_CONTEXT, TAG_GEN_CORRUPT, TAG_GEN_LABELS, TAG_GEN_ORDER, TAG_GEN_PROJECTION,
    TAG_GEN_TEACHER, TAG_GEN_TRACE, TAG_SPLIT,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATASET_FORMAT_VERSION: &str = "rkto-dataset/1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One training item: context, preferred trace, optional reference mask,
/// and the desired/non-desired label. The category doubles as the stratum
/// label for evaluation sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceExample {
    pub id: String,
    pub category: String,
    pub context: Context,
    pub y_pref: Trace,
    pub m_ref: Option<MaskGrid>,
    pub desired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: String,
    pub seed: u64,
    pub total: usize,
    pub counts: Vec<(String, usize)>,
    pub vocab: usize,
    pub ctx_dim: usize,
    pub grid_side: usize,
    pub use_masks: bool,
    pub n_classes: usize,
    pub segment_plan: SegmentPlan,
    pub desired_fraction: f64,
    pub teacher: String,
    pub teacher_sharpness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryWeight {
    pub name: String,
    pub weight: f64,
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub total: usize,
    pub seed: u64,
    pub vocab: usize,
    pub ctx_dim: usize,
    pub grid_side: usize,
    pub use_masks: bool,
    pub seg_thinking: usize,
    pub seg_intermediate: usize,
    pub seg_reflection: usize,
    pub seg_output: usize,
    pub desired_fraction: f64,
    /// Logit gap of the planted teacher's favored tokens.
    pub teacher_sharpness: f64,
    /// Standard deviation of the per-example feature jitter added to the
    /// class one-hot.
    pub feature_noise: f64,
    /// Fraction of desired examples whose output segment is replaced by a
    /// flat draw over content tokens: off-center but still-accepted
    /// instructions. Product policies cannot represent this example-level
    /// mixture, so likelihood fits blur across it while reward-weighted
    /// updates can concentrate on the teacher core. Zero disables it.
    pub output_outlier_fraction: f64,
    /// Per-cell probability of flipping a mask token inside the preferred
    /// trace, modeling annotation noise in the mask blocks. The reference
    /// mask stays clean, so likelihood training clones the noise while the
    /// IoU pathway can exceed it. Zero disables it.
    pub mask_noise_fraction: f64,
    pub categories: Vec<CategoryWeight>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            total: 1000,
            seed: 0,
            vocab: 16,
            ctx_dim: 8,
            grid_side: 4,
            use_masks: true,
            seg_thinking: 2,
            seg_intermediate: 2,
            seg_reflection: 3,
            seg_output: 4,
            desired_fraction: 0.9,
            teacher_sharpness: 3.0,
            feature_noise: 0.05,
            output_outlier_fraction: 0.0,
            mask_noise_fraction: 0.0,
            categories: default_categories(),
        }
    }
}

/// Reference/original mixture used as abstract context classes.
pub fn default_categories() -> Vec<CategoryWeight> {
    [
        ("image-image", 10.0),
        ("image+text-image", 5.0),
        ("video-image", 4.0),
        ("image-video", 3.0),
        ("video+text-image", 3.0),
        ("text-only", 5.0),
    ]
    .into_iter()
    .map(|(name, weight)| CategoryWeight {
        name: name.to_string(),
        weight,
    })
    .collect()
}

impl GenConfig {
    pub fn n_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn content_tokens(&self) -> usize {
        self.vocab.saturating_sub(vocab::CONTENT_BASE as usize)
    }

    pub fn plan(&self) -> SegmentPlan {
        SegmentPlan {
            thinking: self.seg_thinking,
            intermediate: self.seg_intermediate,
            reflection: self.seg_reflection,
            output: self.seg_output,
            mask: if self.use_masks {
                self.grid_side * self.grid_side
            } else {
                0
            },
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.total < 2 {
            return Err(DataError::InvalidInput("total must be at least 2".into()));
        }
        if self.categories.is_empty() || self.categories.iter().any(|c| c.weight <= 0.0) {
            return Err(DataError::InvalidInput(
                "categories must be non-empty with positive weights".into(),
            ));
        }
        if self.content_tokens() < 4 {
            return Err(DataError::InvalidInput(format!(
                "vocab {} leaves fewer than 4 content tokens",
                self.vocab
            )));
        }
        if self.n_classes() > self.content_tokens() {
            return Err(DataError::InvalidInput(
                "more categories than content tokens for class prompts".into(),
            ));
        }
        if self.ctx_dim < self.n_classes() {
            return Err(DataError::InvalidInput(
                "ctx_dim must be at least the number of categories".into(),
            ));
        }
        if self.grid_side == 0 {
            return Err(DataError::InvalidInput("grid_side must be positive".into()));
        }
        if self.seg_intermediate == 0 || self.seg_reflection == 0 || self.seg_output == 0 {
            return Err(DataError::InvalidInput(
                "intermediate, reflection, and output segments need at least one token".into(),
            ));
        }
        if !(self.desired_fraction > 0.0 && self.desired_fraction <= 1.0) {
            return Err(DataError::InvalidInput(
                "desired_fraction must be in (0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.output_outlier_fraction) {
            return Err(DataError::InvalidInput(
                "output_outlier_fraction must be in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_noise_fraction) {
            return Err(DataError::InvalidInput(
                "mask_noise_fraction must be in [0, 1]".into(),
            ));
        }
        if !(self.teacher_sharpness > 0.0) {
            return Err(DataError::InvalidInput(
                "teacher_sharpness must be positive".into(),
            ));
        }
        if self.feature_noise < 0.0 {
            return Err(DataError::InvalidInput(
                "feature_noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `total` across the category weights.
fn apportion(total: usize, categories: &[CategoryWeight]) -> Vec<usize> {
    let weight_sum: f64 = categories.iter().map(|c| c.weight).sum();
    let quotas: Vec<f64> = categories
        .iter()
        .map(|c| total as f64 * c.weight / weight_sum)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..categories.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut i = 0;
    while assigned < total {
        counts[order[i % order.len()]] += 1;
        assigned += 1;
        i += 1;
    }
    counts
}

/// Positions the segments occupy, in flattened order.
fn segment_positions(plan: &SegmentPlan) -> Vec<(SegmentKind, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (kind, len) in plan.lengths() {
        if len > 0 {
            out.push((kind, start..start + len));
            start += len;
        }
    }
    out
}

/// Mask geometry: one shared projection direction plus a per-cell
/// threshold, so a cell is on iff `<direction, features> > threshold[cell]`.
/// The class structure stays additive in (class, cell), which a
/// feature-linear policy can represent.
pub(crate) struct MaskRule {
    pub direction: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl MaskRule {
    fn seeded(cfg: &GenConfig) -> Self {
        let cells = cfg.grid_side * cfg.grid_side;
        let mut r = rng::stream_rng(cfg.seed, &[TAG_GEN_PROJECTION]);
        let mut direction = vec![0.0; cfg.ctx_dim];
        rng::fill_standard_normal(&mut r, &mut direction);
        let thresholds: Vec<f64> = (0..cells)
            .map(|_| 0.6 * rng::standard_normal(&mut r))
            .collect();
        Self {
            direction,
            thresholds,
        }
    }

    fn score(&self, features: &[f64], cell: usize) -> f64 {
        let dot: f64 = self
            .direction
            .iter()
            .zip(features)
            .map(|(a, b)| a * b)
            .sum();
        dot - self.thresholds[cell]
    }

    fn mask_for(&self, features: &[f64], side: usize) -> Result<MaskGrid, DataError> {
        let cells: Vec<u8> = (0..side * side)
            .map(|j| u8::from(self.score(features, j) > 0.0))
            .collect();
        Ok(MaskGrid::new(side, cells)?)
    }
}

/// Builds the planted tabular teacher. Each class favors one seeded content
/// token across all of its text positions (all intermediate and reflection
/// rows therefore coincide, so the teacher's predictive means match), and
/// mask positions favor the class-modal mask token.
fn build_teacher(cfg: &GenConfig, mask_rule: &MaskRule) -> Result<PolicyParams, DataError> {
    let plan = cfg.plan();
    let total_len = plan.total_len();
    let n_classes = cfg.n_classes();
    let content = cfg.content_tokens();
    let sharp = cfg.teacher_sharpness;
    let suppress = -(sharp + 6.0);
    let mut theta = vec![0.0; n_classes * total_len * cfg.vocab];
    for class in 0..n_classes {
        let favored = {
            let mut r = rng::stream_rng(cfg.seed, &[TAG_GEN_TEACHER, class as u64]);
            vocab::CONTENT_BASE as usize + rng::uniform_index(&mut r, content)
        };
        let mut class_features = vec![0.0; cfg.ctx_dim];
        class_features[class] = 1.0;
        for (kind, range) in segment_positions(&plan) {
            for pos in range {
                let row = &mut theta[(class * total_len + pos) * cfg.vocab
                    ..(class * total_len + pos + 1) * cfg.vocab];
                match kind {
                    SegmentKind::Mask => {
                        let cell = pos - (total_len - plan.mask);
                        let on = mask_rule.score(&class_features, cell) > 0.0;
                        for (v, z) in row.iter_mut().enumerate() {
                            let v = v as Token;
                            *z = if v == vocab::MASK_ON {
                                if on { sharp + 2.0 } else { 0.0 }
                            } else if v == vocab::MASK_OFF {
                                if on { 0.0 } else { sharp + 2.0 }
                            } else {
                                suppress
                            };
                        }
                    }
                    _ => {
                        for (v, z) in row.iter_mut().enumerate() {
                            *z = if v == favored {
                                sharp
                            } else if v >= vocab::CONTENT_BASE as usize {
                                0.0
                            } else {
                                suppress
                            };
                        }
                    }
                }
            }
        }
    }
    Ok(PolicyParams::new(
        cfg.vocab,
        crate::policy::PolicyShape::Tabular {
            n_classes,
            max_positions: total_len,
        },
        theta,
    )?)
}

fn mask_tokens(mask: &MaskGrid) -> Vec<Token> {
    mask.cells()
        .iter()
        .map(|&c| if c == 1 { vocab::MASK_ON } else { vocab::MASK_OFF })
        .collect()
}

/// Generates a dataset, its manifest, and the planted teacher policy.
/// Fully reproducible from the config (including its seed).
pub fn generate_dataset(
    cfg: &GenConfig,
) -> Result<(Vec<PreferenceExample>, DatasetManifest, PolicyParams), DataError> {
    cfg.validate()?;
    let plan = cfg.plan();
    let n_classes = cfg.n_classes();
    let cells = cfg.grid_side * cfg.grid_side;

    let mask_rule = MaskRule::seeded(cfg);
    let teacher = build_teacher(cfg, &mask_rule)?;

    let counts = apportion(cfg.total, &cfg.categories);
    let mut class_of: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
        .collect();
    let mut order_rng = rng::stream_rng(cfg.seed, &[TAG_GEN_ORDER]);
    rng::shuffle(&mut order_rng, &mut class_of);

    let n_desired = (cfg.total as f64 * cfg.desired_fraction).round() as usize;
    let mut desired: Vec<bool> = (0..cfg.total).map(|i| i < n_desired).collect();
    let mut label_rng = rng::stream_rng(cfg.seed, &[TAG_GEN_LABELS]);
    rng::shuffle(&mut label_rng, &mut desired);

    let mut examples = Vec::with_capacity(cfg.total);
    for idx in 0..cfg.total {
        let class = class_of[idx];
        let mut features = vec![0.0; cfg.ctx_dim];
        features[class] = 1.0;
        let mut ctx_rng = rng::stream_rng(cfg.seed, &[TAG_GEN_CONTEXT, idx as u64]);
        for f in features.iter_mut() {
            *f += cfg.feature_noise * rng::standard_normal(&mut ctx_rng);
        }
        let prompt = vec![vocab::CONTENT_BASE + class as Token];
        let context = Context::new(features.clone(), prompt)?;

        let m_ref = if cfg.use_masks {
            Some(mask_rule.mask_for(&features, cfg.grid_side)?)
        } else {
            None
        };

        let mut trace_rng = rng::stream_rng(cfg.seed, &[TAG_GEN_TRACE, idx as u64]);
        let outlier = rng::uniform_f64(&mut trace_rng) < cfg.output_outlier_fraction;
        let sampled = crate::policy::sample(&teacher, &context, &mut trace_rng, &plan)?;
        let mut segments: Vec<(SegmentKind, Vec<Token>)> = sampled.segments().to_vec();
        for (kind, tokens) in segments.iter_mut() {
            match kind {
                SegmentKind::Mask => {
                    if let Some(mask) = &m_ref {
                        *tokens = mask_tokens(mask);
                        for t in tokens.iter_mut() {
                            if rng::uniform_f64(&mut trace_rng) < cfg.mask_noise_fraction {
                                *t = if *t == vocab::MASK_ON {
                                    vocab::MASK_OFF
                                } else {
                                    vocab::MASK_ON
                                };
                            }
                        }
                    }
                }
                SegmentKind::Output if outlier => {
                    for t in tokens.iter_mut() {
                        *t = vocab::CONTENT_BASE
                            + rng::uniform_index(&mut trace_rng, cfg.content_tokens()) as Token;
                    }
                }
                _ => {}
            }
        }

        if !desired[idx] {
            let mut corrupt_rng = rng::stream_rng(cfg.seed, &[TAG_GEN_CORRUPT, idx as u64]);
            for (kind, tokens) in segments.iter_mut() {
                match kind {
                    SegmentKind::Reflection => rng::shuffle(&mut corrupt_rng, tokens),
                    SegmentKind::Mask => {
                        let n_flip = ((cells as f64) * 0.25).round() as usize;
                        let mut slots: Vec<usize> = (0..cells).collect();
                        rng::shuffle(&mut corrupt_rng, &mut slots);
                        for &s in slots.iter().take(n_flip) {
                            tokens[s] = if tokens[s] == vocab::MASK_ON {
                                vocab::MASK_OFF
                            } else {
                                vocab::MASK_ON
                            };
                        }
                    }
                    _ => {}
                }
            }
        }

        examples.push(PreferenceExample {
            id: format!("ex-{idx:06}"),
            category: cfg.categories[class].name.clone(),
            context,
            y_pref: Trace::new(segments)?,
            m_ref,
            desired: desired[idx],
        });
    }

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION.to_string(),
        seed: cfg.seed,
        total: cfg.total,
        counts: cfg
            .categories
            .iter()
            .zip(&counts)
            .map(|(c, &n)| (c.name.clone(), n))
            .collect(),
        vocab: cfg.vocab,
        ctx_dim: cfg.ctx_dim,
        grid_side: cfg.grid_side,
        use_masks: cfg.use_masks,
        n_classes,
        segment_plan: plan,
        desired_fraction: cfg.desired_fraction,
        teacher: format!(
            "tabular planted teacher: {} classes x {} positions, shared intermediate/reflection rows",
            n_classes,
            plan.total_len()
        ),
        teacher_sharpness: cfg.teacher_sharpness,
    };
    Ok((examples, manifest, teacher))
}

/// Seeded shuffle-and-split into disjoint, exhaustive train/val parts.
/// The validation size is `round(n * val_fraction)`, clamped so neither
/// side is empty.
pub fn split(
    examples: &[PreferenceExample],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<PreferenceExample>, Vec<PreferenceExample>), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::InvalidInput(
            "val_fraction must be in (0, 1)".into(),
        ));
    }
    if examples.len() < 2 {
        return Err(DataError::InvalidInput(
            "need at least two examples to split".into(),
        ));
    }
    let n = examples.len();
    let val_n = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rng::stream_rng(seed, &[TAG_SPLIT]);
    rng::shuffle(&mut split_rng, &mut order);
    let val: Vec<PreferenceExample> = order[..val_n]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    let train: Vec<PreferenceExample> = order[val_n..]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    Ok((train, val))
}
