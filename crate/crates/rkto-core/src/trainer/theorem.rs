//! Empirical verifier of the monotonic-alignment guarantee: on a tabular
//! planted task, RKTO ascent steps should decrease the composite divergence
//! `K(phi) = KL(rho_phi(y|x) || rho_pref(y|x)) +
//! lambda_ref * KL(rho_phi(r_refl|x) || rho_pref(r_refl|x))`.

use super::grad::BatchView;
use super::metrics::MetricsRecord;
use super::schedule::train_step;
use super::{TrainConfig, TrainError};
use crate::optim::AdamState;
use crate::policy::{
    tabular_segment_kl, PolicyParams, PolicyShape, SegmentKind, SegmentPlan,
};
use crate::rewards::RewardConfig;
use crate::synthdata::PreferenceExample;
use serde::{Deserialize, Serialize};

/// Steps are counted non-increasing when the composite KL rises by no more
/// than this slack.
pub const THEOREM_SLACK: f64 = 1e-6;
/// Required fraction of non-increasing steps.
pub const THEOREM_MIN_NONINCREASING: f64 = 0.95;
/// Required final-to-initial composite-KL ratio.
pub const THEOREM_MAX_FINAL_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremPoint {
    pub step: u64,
    pub kl_output: f64,
    pub kl_reflect: f64,
    pub kl_composite: f64,
}

#[derive(Debug, Clone)]
pub struct TheoremOutcome {
    /// Composite KL at initialization and after every accepted step.
    pub trajectory: Vec<TheoremPoint>,
    pub final_params: PolicyParams,
    pub records: Vec<MetricsRecord>,
}

fn require_tabular(params: &PolicyParams, what: &str) -> Result<(), TrainError> {
    match params.shape() {
        PolicyShape::Tabular { .. } => Ok(()),
        PolicyShape::Featurized { .. } => Err(TrainError::Capability(format!(
            "{what} must be a tabular policy for exact KL"
        ))),
    }
}

/// Mean composite divergence to the planted preferred policy over the
/// batch contexts. The reflection term drops out when `lambda_ref` is zero.
pub fn composite_kl(
    params: &PolicyParams,
    teacher: &PolicyParams,
    batch: &BatchView,
    plan: &SegmentPlan,
    lambda_ref: f64,
) -> Result<(f64, f64, f64), TrainError> {
    require_tabular(params, "the policy")?;
    require_tabular(teacher, "the preferred policy")?;
    if batch.is_empty() {
        return Err(TrainError::InvalidInput("empty batch".into()));
    }
    if plan.output == 0 {
        return Err(TrainError::InvalidInput(
            "composite KL needs an output segment in the plan".into(),
        ));
    }
    if lambda_ref > 0.0 && plan.reflection == 0 {
        return Err(TrainError::InvalidInput(
            "composite KL with lambda_ref > 0 needs a reflection segment".into(),
        ));
    }
    let mut out_sum = 0.0;
    let mut refl_sum = 0.0;
    for (_, ex) in batch.iter() {
        out_sum += tabular_segment_kl(params, teacher, &ex.context, plan, SegmentKind::Output)?;
        if lambda_ref > 0.0 {
            refl_sum +=
                tabular_segment_kl(params, teacher, &ex.context, plan, SegmentKind::Reflection)?;
        }
    }
    let n = batch.len() as f64;
    let kl_output = out_sum / n;
    let kl_reflect = refl_sum / n;
    Ok((kl_output, kl_reflect, kl_output + lambda_ref * kl_reflect))
}

/// Runs `theorem_steps` full-batch RKTO steps from `initial`, recording the
/// exact composite KL to the planted teacher after every accepted step.
pub fn theorem_check(
    initial: PolicyParams,
    teacher: &PolicyParams,
    data: &[PreferenceExample],
    plan: &SegmentPlan,
    rcfg: &RewardConfig,
    tcfg: &TrainConfig,
) -> Result<TheoremOutcome, TrainError> {
    require_tabular(&initial, "the initial policy")?;
    require_tabular(teacher, "the preferred policy")?;
    if data.len() < 2 {
        return Err(TrainError::InvalidInput(
            "theorem check needs at least two examples".into(),
        ));
    }
    rcfg.validate()?;
    tcfg.validate()?;

    let indices: Vec<usize> = (0..data.len()).collect();
    let batch = BatchView::new(data, &indices);
    let mut params = initial;
    let mut reference = params.snapshot(0);
    let mut opt = AdamState::new(params.param_count());
    let mut trajectory = Vec::with_capacity(tcfg.theorem_steps as usize + 1);
    let mut records = Vec::with_capacity(tcfg.theorem_steps as usize);

    let (kl_output, kl_reflect, kl_composite) =
        composite_kl(&params, teacher, &batch, plan, rcfg.lambda_ref)?;
    trajectory.push(TheoremPoint {
        step: 0,
        kl_output,
        kl_reflect,
        kl_composite,
    });

    for s in 0..tcfg.theorem_steps {
        // Each full-batch step is one epoch of the schedule; the RNG
        // streams and the snapshot cadence follow the step index.
        let mut record = train_step(
            &mut params,
            &reference,
            &batch,
            rcfg,
            tcfg,
            s,
            &mut opt,
            s as u64,
        )?;
        let accepted = record.note.is_none();
        if accepted {
            let (kl_output, kl_reflect, kl_composite) =
                composite_kl(&params, teacher, &batch, plan, rcfg.lambda_ref)?;
            record.kl_composite = Some(kl_composite);
            trajectory.push(TheoremPoint {
                step: s as u64 + 1,
                kl_output,
                kl_reflect,
                kl_composite,
            });
        }
        records.push(record);
        if tcfg.snapshot_interval > 0 && (s + 1) % tcfg.snapshot_interval == 0 {
            reference = params.snapshot(s as u64 + 1);
        }
    }

    Ok(TheoremOutcome {
        trajectory,
        final_params: params,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremVerdict {
    pub initial: f64,
    pub final_value: f64,
    pub frac_nonincreasing: f64,
    pub pass: bool,
}

/// Pass criteria: final composite KL at most half the initial value and at
/// least 95% of steps non-increasing within the slack.
pub fn theorem_verdict(trajectory: &[TheoremPoint]) -> TheoremVerdict {
    assert!(!trajectory.is_empty(), "empty theorem trajectory");
    let initial = trajectory[0].kl_composite;
    let final_value = trajectory.last().unwrap().kl_composite;
    let steps = trajectory.len().saturating_sub(1);
    let nonincreasing = trajectory
        .windows(2)
        .filter(|w| w[1].kl_composite <= w[0].kl_composite + THEOREM_SLACK)
        .count();
    let frac = if steps == 0 {
        1.0
    } else {
        nonincreasing as f64 / steps as f64
    };
    TheoremVerdict {
        initial,
        final_value,
        frac_nonincreasing: frac,
        pass: final_value <= THEOREM_MAX_FINAL_RATIO * initial
            && frac >= THEOREM_MIN_NONINCREASING,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, GenConfig};

    /// Small tabular task without masks; the teacher's trace space is
    /// V = 6-ish over 4 positions.
    fn theorem_cfg(sharpness: f64) -> GenConfig {
        GenConfig {
            total: 64,
            vocab: 13,
            ctx_dim: 6,
            use_masks: false,
            seg_thinking: 0,
            seg_intermediate: 1,
            seg_reflection: 1,
            seg_output: 2,
            teacher_sharpness: sharpness,
            ..GenConfig::default()
        }
    }

    #[test]
    fn fixed_point_at_the_preferred_policy() {
        // A near-deterministic teacher: initialized at the teacher itself,
        // every sample hits the preferred trace, rewards are constant, and
        // the gradient vanishes exactly, so the composite KL stays at zero.
        let cfg = theorem_cfg(40.0);
        let (data, manifest, teacher) = generate_dataset(&cfg).unwrap();
        let rcfg = RewardConfig::default();
        let mut tcfg = TrainConfig::default();
        tcfg.theorem_steps = 50;
        tcfg.rkto_lr = 0.02;
        tcfg.sft_lr = 0.05;
        let out = theorem_check(
            teacher.clone(),
            &teacher,
            &data,
            &manifest.segment_plan,
            &rcfg,
            &tcfg,
        )
        .unwrap();
        assert_eq!(out.trajectory.len(), 51);
        for point in &out.trajectory {
            assert!(
                point.kl_composite <= 1e-6,
                "step {}: composite {}",
                point.step,
                point.kl_composite
            );
        }
    }

    #[test]
    fn composite_collapses_to_output_term_without_reflection_weight() {
        let cfg = theorem_cfg(3.0);
        let (data, manifest, teacher) = generate_dataset(&cfg).unwrap();
        let params = crate::policy::PolicyParams::tabular(
            cfg.vocab,
            cfg.n_classes(),
            manifest.segment_plan.total_len(),
            crate::policy::Init::Seeded { seed: 9, scale: 0.5 },
        )
        .unwrap();
        let indices: Vec<usize> = (0..data.len()).collect();
        let batch = BatchView::new(&data, &indices);
        let (out, refl, composite) =
            composite_kl(&params, &teacher, &batch, &manifest.segment_plan, 0.0).unwrap();
        assert_eq!(refl, 0.0);
        assert_eq!(composite, out);
        let (out2, refl2, composite2) =
            composite_kl(&params, &teacher, &batch, &manifest.segment_plan, 0.2).unwrap();
        assert_eq!(out, out2);
        assert!(refl2 > 0.0);
        assert!((composite2 - (out2 + 0.2 * refl2)).abs() < 1e-12);
    }

    #[test]
    fn featurized_policies_are_rejected() {
        let cfg = theorem_cfg(3.0);
        let (data, manifest, teacher) = generate_dataset(&cfg).unwrap();
        let featurized = crate::policy::PolicyParams::featurized(
            cfg.vocab,
            cfg.ctx_dim,
            4,
            crate::policy::Init::Zeros,
        )
        .unwrap();
        let err = theorem_check(
            featurized,
            &teacher,
            &data,
            &manifest.segment_plan,
            &RewardConfig::default(),
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Capability(_)));
    }

    #[test]
    fn verdict_arithmetic() {
        let mk = |vals: &[f64]| -> Vec<TheoremPoint> {
            vals.iter()
                .enumerate()
                .map(|(i, &v)| TheoremPoint {
                    step: i as u64,
                    kl_output: v,
                    kl_reflect: 0.0,
                    kl_composite: v,
                })
                .collect()
        };
        let good = theorem_verdict(&mk(&[4.0, 3.0, 2.0, 1.5]));
        assert!(good.pass);
        assert_eq!(good.frac_nonincreasing, 1.0);
        let shallow = theorem_verdict(&mk(&[4.0, 3.9, 3.8, 3.7]));
        assert!(!shallow.pass);
        let bumpy = theorem_verdict(&mk(&[4.0, 5.0, 3.0, 1.0]));
        assert!((bumpy.frac_nonincreasing - 2.0 / 3.0).abs() < 1e-12);
        assert!(!bumpy.pass);
    }
}
