//! The alternating SFT/RKTO schedule, optimizer step, evaluation, and the
//! resumable training state.

use super::grad::{batch_stats, rkto_grad, rkto_objective, BatchView};
use super::metrics::{MetricsRecord, Phase};
use super::{mean, TrainConfig, TrainError};
use crate::numerics::l2_norm;
use crate::optim::AdamState;
use crate::policy::{log_prob, sft_loss_and_grad, PolicyParams, PolicySnapshot};
use crate::rewards::RewardConfig;
use crate::rng::{self, TAG_EVAL_SAMPLE, TAG_RKTO_SHUFFLE, TAG_SFT_SHUFFLE};
use crate::synthdata::PreferenceExample;
use serde::{Deserialize, Serialize};

/// Relative plateau tolerance of the convergence rule.
const PLATEAU_REL_TOL: f64 = 1e-3;
/// Number of consecutive evaluations the plateau rule inspects.
const PLATEAU_WINDOW: usize = 5;

/// Everything needed to continue a run: parameters, reference snapshot,
/// optimizer moments, and schedule counters. Serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: PolicyParams,
    pub reference: PolicySnapshot,
    pub opt: AdamState,
    pub step: u64,
    pub sft_epochs_done: u32,
    pub rkto_epochs_done: u32,
    pub val_history: Vec<f64>,
    pub converged_step: Option<u64>,
}

pub fn new_state(params: PolicyParams) -> TrainState {
    let reference = params.snapshot(0);
    let opt = AdamState::new(params.param_count());
    TrainState {
        params,
        reference,
        opt,
        step: 0,
        sft_epochs_done: 0,
        rkto_epochs_done: 0,
        val_history: Vec::new(),
        converged_step: None,
    }
}

impl TrainState {
    pub fn refresh_reference(&mut self) {
        self.reference = self.params.snapshot(self.step);
    }

    fn global_epoch(&self) -> u32 {
        self.sft_epochs_done + self.rkto_epochs_done
    }
}

/// One RKTO ascent step. A non-finite gradient rejects the step: the
/// parameters stay untouched and the record carries an error note.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut PolicyParams,
    reference: &PolicySnapshot,
    batch: &BatchView,
    rcfg: &RewardConfig,
    tcfg: &TrainConfig,
    epoch: u32,
    opt: &mut AdamState,
    step: u64,
) -> Result<MetricsRecord, TrainError> {
    let g = rkto_grad(params, reference, batch, rcfg, tcfg, epoch)?;
    let finite = g.ascent.iter().all(|v| v.is_finite());
    let mut record = MetricsRecord {
        step,
        phase: Phase::Rkto,
        epoch,
        j_hat: Some(rkto_objective(&g.stats, rcfg)),
        eta0: Some(g.stats.eta0_hat),
        mean_s: Some(g.stats.mean_s()),
        mean_c: Some(g.stats.mean_c()),
        mean_r_eff: Some(g.stats.mean_r_eff()),
        mean_r_reflect: Some(g.stats.mean_r_reflect()),
        b_iou: Some(g.stats.b_iou),
        grad_norm: Some(g.pre_clip_norm),
        ..MetricsRecord::default()
    };
    if !finite {
        record.note = Some("step rejected: non-finite gradient".into());
        return Ok(record);
    }
    let descent: Vec<f64> = g.ascent.iter().map(|v| -v).collect();
    opt.step(params.theta_mut(), &descent, tcfg.rkto_lr);
    Ok(record)
}

/// Chunks `0..n` into contiguous ranges of `size`, merging a trailing
/// single-element chunk into its predecessor (batch statistics need at
/// least two examples).
fn chunk_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + size).min(n);
        out.push(start..end);
        start = end;
    }
    if out.len() >= 2 && out.last().map(|r| r.len()) == Some(1) {
        let last = out.pop().unwrap();
        let prev = out.pop().unwrap();
        out.push(prev.start..last.end);
    }
    out
}

#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub records: Vec<MetricsRecord>,
    pub aborted: bool,
}

fn abort_reached(state: &TrainState, tcfg: &TrainConfig) -> bool {
    tcfg.abort_after_steps.is_some_and(|limit| state.step >= limit)
}

/// One SFT epoch over a seeded shuffle of the training set.
pub fn run_sft_epoch(
    state: &mut TrainState,
    train: &[PreferenceExample],
    tcfg: &TrainConfig,
) -> Result<EpochOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::InvalidInput("empty training set".into()));
    }
    let epoch = state.global_epoch();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::stream_rng(tcfg.seed, &[TAG_SFT_SHUFFLE, epoch as u64]);
    rng::shuffle(&mut shuffle_rng, &mut order);

    let mut records = Vec::new();
    for range in chunk_ranges(train.len(), tcfg.batch_size) {
        if abort_reached(state, tcfg) {
            return Ok(EpochOutcome {
                records,
                aborted: true,
            });
        }
        let refs: Vec<(&crate::policy::Context, &crate::policy::Trace)> = order[range]
            .iter()
            .map(|&i| (&train[i].context, &train[i].y_pref))
            .collect();
        let (loss, grad) = sft_loss_and_grad(&state.params, &refs)?;
        let grad_norm = l2_norm(&grad);
        let mut record = MetricsRecord {
            step: state.step,
            phase: Phase::Sft,
            epoch,
            sft_loss: Some(loss),
            grad_norm: Some(grad_norm),
            ..MetricsRecord::default()
        };
        if grad.iter().all(|v| v.is_finite()) {
            state
                .opt
                .step(state.params.theta_mut(), &grad, tcfg.sft_lr);
        } else {
            record.note = Some("step rejected: non-finite gradient".into());
        }
        state.step += 1;
        records.push(record);
    }
    Ok(EpochOutcome {
        records,
        aborted: false,
    })
}

/// One RKTO epoch over a seeded shuffle of the training set.
pub fn run_rkto_epoch(
    state: &mut TrainState,
    train: &[PreferenceExample],
    rcfg: &RewardConfig,
    tcfg: &TrainConfig,
) -> Result<EpochOutcome, TrainError> {
    if train.len() < 2 {
        return Err(TrainError::InvalidInput(
            "RKTO needs at least two training examples".into(),
        ));
    }
    let epoch = state.global_epoch();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::stream_rng(tcfg.seed, &[TAG_RKTO_SHUFFLE, epoch as u64]);
    rng::shuffle(&mut shuffle_rng, &mut order);

    let mut records = Vec::new();
    for range in chunk_ranges(train.len(), tcfg.batch_size) {
        if abort_reached(state, tcfg) {
            return Ok(EpochOutcome {
                records,
                aborted: true,
            });
        }
        let indices = &order[range];
        let batch = BatchView::new(train, indices);
        let record = train_step(
            &mut state.params,
            &state.reference,
            &batch,
            rcfg,
            tcfg,
            epoch,
            &mut state.opt,
            state.step,
        )?;
        state.step += 1;
        records.push(record);
    }
    Ok(EpochOutcome {
        records,
        aborted: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub j_hat: f64,
    pub sft_loss: f64,
    pub eta0: f64,
    pub mean_s: f64,
    pub mean_c: f64,
    pub mean_r_eff: f64,
    pub mean_r_reflect: f64,
}

/// Validation metrics over fixed-order batches. Sampling uses the
/// evaluation stream family, so evaluation never perturbs training RNG.
pub fn evaluate(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    val: &[PreferenceExample],
    rcfg: &RewardConfig,
    tcfg: &TrainConfig,
    epoch: u32,
) -> Result<EvalSummary, TrainError> {
    if val.len() < 2 {
        return Err(TrainError::InvalidInput(
            "validation set needs at least two examples".into(),
        ));
    }
    let n = val.len() as f64;
    let mut objective_sum = 0.0;
    let mut sft_sum = 0.0;
    let mut eta0_sum = 0.0;
    let mut s_all = Vec::with_capacity(val.len());
    let mut c_all = Vec::with_capacity(val.len());
    let mut r_eff_all = Vec::with_capacity(val.len());
    let mut r_reflect_all = Vec::with_capacity(val.len());
    for range in chunk_ranges(val.len(), tcfg.batch_size) {
        let indices: Vec<usize> = range.clone().collect();
        let batch = BatchView::new(val, &indices);
        let (stats, _) = batch_stats(params, reference, &batch, rcfg, tcfg, epoch, TAG_EVAL_SAMPLE)?;
        objective_sum += rkto_objective(&stats, rcfg) * batch.len() as f64;
        eta0_sum += stats.eta0_hat * batch.len() as f64;
        s_all.extend_from_slice(&stats.s_hat);
        c_all.extend_from_slice(&stats.c);
        r_eff_all.extend_from_slice(&stats.r_eff);
        r_reflect_all.extend_from_slice(&stats.r_reflect);
        for (_, ex) in batch.iter() {
            sft_sum -= log_prob(params, &ex.context, &ex.y_pref)?.total;
        }
    }
    Ok(EvalSummary {
        j_hat: objective_sum / n,
        sft_loss: sft_sum / n,
        eta0: eta0_sum / n,
        mean_s: mean(&s_all),
        mean_c: mean(&c_all),
        mean_r_eff: mean(&r_eff_all),
        mean_r_reflect: mean(&r_reflect_all),
    })
}

/// Runs validation, appends to the plateau history, and flags convergence
/// once the window stabilizes.
pub fn eval_record(
    state: &mut TrainState,
    val: &[PreferenceExample],
    rcfg: &RewardConfig,
    tcfg: &TrainConfig,
) -> Result<MetricsRecord, TrainError> {
    let epoch = state.global_epoch();
    let summary = evaluate(&state.params, &state.reference, val, rcfg, tcfg, epoch)?;
    state.val_history.push(summary.j_hat);
    let mut converged = None;
    if state.converged_step.is_none() && state.val_history.len() >= PLATEAU_WINDOW {
        let window = &state.val_history[state.val_history.len() - PLATEAU_WINDOW..];
        let lo = window.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let center = mean(window).abs().max(1e-9);
        if (hi - lo) / center < PLATEAU_REL_TOL {
            state.converged_step = Some(state.step);
            converged = Some(true);
        }
    }
    Ok(MetricsRecord {
        step: state.step,
        phase: Phase::Eval,
        epoch,
        sft_loss: Some(summary.sft_loss),
        j_hat: Some(summary.j_hat),
        eta0: Some(summary.eta0),
        mean_s: Some(summary.mean_s),
        mean_c: Some(summary.mean_c),
        mean_r_eff: Some(summary.mean_r_eff),
        mean_r_reflect: Some(summary.mean_r_reflect),
        converged,
        ..MetricsRecord::default()
    })
}

/// What the schedule does next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextEpoch {
    Sft,
    Rkto,
    Done,
}

pub fn next_epoch(state: &TrainState, tcfg: &TrainConfig) -> NextEpoch {
    if state.sft_epochs_done < tcfg.sft_epochs {
        NextEpoch::Sft
    } else if state.rkto_epochs_done < tcfg.rkto_epochs {
        NextEpoch::Rkto
    } else {
        NextEpoch::Done
    }
}

/// Advances one scheduled epoch (with its validation pass and reference
/// refresh). Returns `None` when the schedule is complete.
pub fn run_next_epoch(
    state: &mut TrainState,
    train: &[PreferenceExample],
    val: &[PreferenceExample],
    rcfg: &RewardConfig,
    tcfg: &TrainConfig,
) -> Result<Option<EpochOutcome>, TrainError> {
    let phase = next_epoch(state, tcfg);
    let outcome = match phase {
        NextEpoch::Done => return Ok(None),
        NextEpoch::Sft => {
            let mut outcome = run_sft_epoch(state, train, tcfg)?;
            if outcome.aborted {
                return Ok(Some(outcome));
            }
            state.sft_epochs_done += 1;
            let interval_hit = tcfg.snapshot_interval > 0
                && state.sft_epochs_done % tcfg.snapshot_interval == 0;
            // The SFT phase always leaves its final snapshot as the RKTO
            // reference.
            if interval_hit || state.sft_epochs_done == tcfg.sft_epochs {
                state.refresh_reference();
            }
            outcome.records.push(eval_record(state, val, rcfg, tcfg)?);
            outcome
        }
        NextEpoch::Rkto => {
            let mut outcome = run_rkto_epoch(state, train, rcfg, tcfg)?;
            if outcome.aborted {
                return Ok(Some(outcome));
            }
            state.rkto_epochs_done += 1;
            outcome.records.push(eval_record(state, val, rcfg, tcfg)?);
            if tcfg.snapshot_interval > 0
                && state.rkto_epochs_done % tcfg.snapshot_interval == 0
            {
                state.refresh_reference();
            }
            outcome
        }
    };
    Ok(Some(outcome))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
    pub aborted: bool,
}

/// Full schedule: `sft_epochs` of SFT with periodic reference snapshots,
/// then `rkto_epochs` of RKTO with periodic reference refreshes, with a
/// validation record per epoch.
pub fn run_training(
    initial: PolicyParams,
    train: &[PreferenceExample],
    val: &[PreferenceExample],
    rcfg: &RewardConfig,
    tcfg: &TrainConfig,
) -> Result<RunOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::InvalidInput("empty training set".into()));
    }
    rcfg.validate()?;
    tcfg.validate()?;
    let mut state = new_state(initial);
    let mut records = Vec::new();
    let mut aborted = false;
    while let Some(outcome) = run_next_epoch(&mut state, train, val, rcfg, tcfg)? {
        records.extend(outcome.records);
        if outcome.aborted {
            aborted = true;
            break;
        }
    }
    Ok(RunOutcome {
        state,
        records,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Init, PolicyParams};
    use crate::synthdata::{generate_dataset, split, GenConfig};

    fn fixture(total: usize) -> (Vec<PreferenceExample>, Vec<PreferenceExample>) {
        let cfg = GenConfig {
            total,
            grid_side: 2,
            ..GenConfig::default()
        };
        let (examples, _, _) = generate_dataset(&cfg).unwrap();
        split(&examples, 0.25, 11).unwrap()
    }

    fn tiny_tcfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            sft_epochs: 2,
            rkto_epochs: 2,
            mc_samples: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn chunking_merges_trailing_singleton() {
        assert_eq!(chunk_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(chunk_ranges(9, 4), vec![0..4, 4..9]);
        assert_eq!(chunk_ranges(3, 8), vec![0..3]);
        assert_eq!(chunk_ranges(1, 8), vec![0..1]);
    }

    #[test]
    fn train_step_is_deterministic_and_zero_lr_is_identity() {
        let (train, _) = fixture(24);
        let idx: Vec<usize> = (0..8).collect();
        let batch = BatchView::new(&train, &idx);
        let rcfg = RewardConfig::default();
        let tcfg = tiny_tcfg();
        let init =
            PolicyParams::featurized(16, 8, 4, Init::Seeded { seed: 1, scale: 0.2 }).unwrap();
        let reference = init.snapshot(0);

        let mut p1 = init.clone();
        let mut o1 = AdamState::new(p1.param_count());
        let r1 = train_step(&mut p1, &reference, &batch, &rcfg, &tcfg, 0, &mut o1, 0).unwrap();
        let mut p2 = init.clone();
        let mut o2 = AdamState::new(p2.param_count());
        let r2 = train_step(&mut p2, &reference, &batch, &rcfg, &tcfg, 0, &mut o2, 0).unwrap();
        assert_eq!(p1.theta(), p2.theta());
        assert_eq!(r1, r2);

        // A degenerate learning rate leaves the parameters unchanged.
        let mut tcfg_zero = tcfg.clone();
        tcfg_zero.rkto_lr = 0.0;
        let mut p3 = init.clone();
        let mut o3 = AdamState::new(p3.param_count());
        train_step(&mut p3, &reference, &batch, &rcfg, &tcfg_zero, 0, &mut o3, 0).unwrap();
        assert_eq!(p3.theta(), init.theta());
        assert_eq!(o3.step_count(), 1);
    }

    #[test]
    fn zero_gradient_batch_keeps_params_fixed() {
        // A single-class dataset under a near-deterministic teacher makes
        // every preferred trace and every Monte-Carlo sample identical, so
        // centered rewards vanish; with lambda_ref = 0 and no masks the
        // whole ascent gradient is exactly zero.
        let cfg = GenConfig {
            total: 4,
            use_masks: false,
            teacher_sharpness: 40.0,
            categories: vec![crate::synthdata::CategoryWeight {
                name: "only".into(),
                weight: 1.0,
            }],
            ..GenConfig::default()
        };
        let (data, _, teacher) = generate_dataset(&cfg).unwrap();
        let mut params = teacher.clone();
        let idx: Vec<usize> = (0..4).collect();
        let batch = BatchView::new(&data, &idx);
        let mut rcfg = RewardConfig::default();
        rcfg.lambda_ref = 0.0;
        let tcfg = tiny_tcfg();
        let reference = params.snapshot(0);
        let before = params.theta().to_vec();
        let mut opt = AdamState::new(params.param_count());
        let record =
            train_step(&mut params, &reference, &batch, &rcfg, &tcfg, 0, &mut opt, 0).unwrap();
        assert_eq!(record.grad_norm, Some(0.0));
        assert_eq!(params.theta(), before.as_slice());
    }

    #[test]
    fn sft_only_run_decreases_loss() {
        let (train, val) = fixture(32);
        let rcfg = RewardConfig::default();
        let mut tcfg = tiny_tcfg();
        tcfg.sft_epochs = 3;
        tcfg.rkto_epochs = 0;
        let init =
            PolicyParams::featurized(16, 8, 4, Init::Seeded { seed: 2, scale: 0.1 }).unwrap();
        let out = run_training(init, &train, &val, &rcfg, &tcfg).unwrap();
        let sft_losses: Vec<f64> = out
            .records
            .iter()
            .filter(|r| r.phase == Phase::Sft)
            .filter_map(|r| r.sft_loss)
            .collect();
        assert!(sft_losses.last().unwrap() < sft_losses.first().unwrap());
        assert_eq!(out.state.rkto_epochs_done, 0);
    }

    #[test]
    fn rkto_only_run_logs_all_batch_stats() {
        let (train, val) = fixture(24);
        let rcfg = RewardConfig::default();
        let mut tcfg = tiny_tcfg();
        tcfg.sft_epochs = 0;
        tcfg.rkto_epochs = 1;
        let init =
            PolicyParams::featurized(16, 8, 4, Init::Seeded { seed: 3, scale: 0.1 }).unwrap();
        let out = run_training(init, &train, &val, &rcfg, &tcfg).unwrap();
        let rkto: Vec<&MetricsRecord> = out
            .records
            .iter()
            .filter(|r| r.phase == Phase::Rkto)
            .collect();
        assert!(!rkto.is_empty());
        for r in rkto {
            assert!(r.j_hat.is_some());
            assert!(r.eta0.is_some());
            assert!(r.mean_s.is_some());
            assert!(r.mean_c.is_some());
            assert!(r.mean_r_eff.is_some());
            assert!(r.mean_r_reflect.is_some());
            assert!(r.b_iou.is_some());
            assert!(r.grad_norm.is_some());
        }
    }

    #[test]
    fn identical_seeds_give_identical_metric_logs() {
        let (train, val) = fixture(24);
        let rcfg = RewardConfig::default();
        let tcfg = tiny_tcfg();
        let init =
            PolicyParams::featurized(16, 8, 4, Init::Seeded { seed: 4, scale: 0.1 }).unwrap();
        let a = run_training(init.clone(), &train, &val, &rcfg, &tcfg).unwrap();
        let b = run_training(init, &train, &val, &rcfg, &tcfg).unwrap();
        let lines_a: String = a.records.iter().map(|r| r.to_ndjson_line()).collect();
        let lines_b: String = b.records.iter().map(|r| r.to_ndjson_line()).collect();
        assert_eq!(lines_a, lines_b);
        assert_eq!(a.state.params.theta(), b.state.params.theta());
    }

    #[test]
    fn abort_hook_stops_mid_epoch() {
        let (train, val) = fixture(24);
        let rcfg = RewardConfig::default();
        let mut tcfg = tiny_tcfg();
        tcfg.abort_after_steps = Some(1);
        let init =
            PolicyParams::featurized(16, 8, 4, Init::Seeded { seed: 5, scale: 0.1 }).unwrap();
        let out = run_training(init, &train, &val, &rcfg, &tcfg).unwrap();
        assert!(out.aborted);
        assert_eq!(out.records.len(), 1);
    }
}
