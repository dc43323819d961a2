//! Batched statistics and the three-term RKTO gradient estimator:
//! importance-weighted preferred-trace likelihood, the differentiable
//! reflection surrogate, and the REINFORCE correction for mask IoU.

use super::{mean, BatchStats, Eta0Mode, TrainConfig, TrainError};
use crate::numerics::{iou, l2_norm, weight_fn};
use crate::optim::{axpy, clip_l2norm};
use crate::policy::{
    decode_mask, exact_kl_to, grad_log_prob, grad_log_prob_segment, log_prob,
    segment_predictive_dist, PolicyParams, PolicyShape, PolicySnapshot, SegmentKind, SegmentPlan,
    Trace,
};
use crate::rewards::{r_eff, r_reflect, reflect_loss_and_grad, RewardConfig};
use crate::rng::{self, TAG_MASK_SAMPLE};
use crate::synthdata::PreferenceExample;

/// A batch as stable global indices into a dataset slice. The indices seed
/// the per-example RNG streams, so an example samples identically wherever
/// it lands in a shuffled epoch.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub data: &'a [PreferenceExample],
    pub indices: &'a [usize],
}

impl<'a> BatchView<'a> {
    pub fn new(data: &'a [PreferenceExample], indices: &'a [usize]) -> Self {
        Self { data, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &'a PreferenceExample)> + '_ {
        self.indices.iter().map(|&i| (i, &self.data[i]))
    }
}

/// Per-example log-ratios of the preferred traces:
/// `log rho_params(y_pref_i | x_i) - log rho_ref(y_pref_i | x_i)`.
pub fn batch_log_ratios(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    batch: &BatchView,
) -> Result<Vec<f64>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::InvalidInput("empty batch".into()));
    }
    let mut out = Vec::with_capacity(batch.len());
    for (_, ex) in batch.iter() {
        let lp = log_prob(params, &ex.context, &ex.y_pref)?.total;
        let lq = log_prob(reference.params(), &ex.context, &ex.y_pref)?.total;
        out.push(lp - lq);
    }
    Ok(out)
}

/// Cross-pair baseline estimate
/// `max(0, mean over i != j of log[rho(y_j|x_i)/rho_ref(y_j|x_i)])`.
pub fn eta0_estimate(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    batch: &BatchView,
) -> Result<f64, TrainError> {
    let b = batch.len();
    if b < 2 {
        return Err(TrainError::InvalidInput(
            "cross-pair baseline needs a batch of at least 2".into(),
        ));
    }
    let examples: Vec<&PreferenceExample> = batch.iter().map(|(_, e)| e).collect();
    let mut sum = 0.0;
    for (i, xi) in examples.iter().enumerate() {
        for (j, yj) in examples.iter().enumerate() {
            if i == j {
                continue;
            }
            let lp = log_prob(params, &xi.context, &yj.y_pref)?.total;
            let lq = log_prob(reference.params(), &xi.context, &yj.y_pref)?.total;
            sum += lp - lq;
        }
    }
    Ok((sum / (b * (b - 1)) as f64).max(0.0))
}

/// Per-example exact sequence-KL baseline, available for tabular policies.
pub fn eta0_exact(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    batch: &BatchView,
) -> Result<f64, TrainError> {
    if !matches!(params.shape(), PolicyShape::Tabular { .. }) {
        return Err(TrainError::Capability(
            "exact eta0 requires a tabular policy".into(),
        ));
    }
    if batch.is_empty() {
        return Err(TrainError::InvalidInput("empty batch".into()));
    }
    let mut sum = 0.0;
    for (_, ex) in batch.iter() {
        sum += exact_kl_to(params, reference, &ex.context, ex.y_pref.len())?;
    }
    Ok((sum / batch.len() as f64).max(0.0))
}

fn eta0_for(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    batch: &BatchView,
    tcfg: &TrainConfig,
) -> Result<f64, TrainError> {
    match tcfg.eta0_mode {
        Eta0Mode::Batch => eta0_estimate(params, reference, batch),
        Eta0Mode::Exact => eta0_exact(params, reference, batch),
    }
}

/// The empirical objective the optimizer ascends:
/// `(1/B) sum_i [c_i * R_eff_i + lambda_ref * R_reflect_i]`.
pub fn rkto_objective(stats: &BatchStats, cfg: &RewardConfig) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..stats.len() {
        sum += stats.c[i] * stats.r_eff[i] + cfg.lambda_ref * stats.r_reflect[i];
    }
    sum / stats.len() as f64
}

fn has_reflection_segments(ex: &PreferenceExample) -> bool {
    ex.y_pref.segment(SegmentKind::Intermediate).is_some()
        && ex.y_pref.segment(SegmentKind::Reflection).is_some()
}

fn reflect_value_on(
    params: &PolicyParams,
    ex: &PreferenceExample,
    trace: &Trace,
    rcfg: &RewardConfig,
) -> Result<f64, TrainError> {
    let refl = trace.segment(SegmentKind::Reflection).ok_or_else(|| {
        TrainError::InvalidInput("trace has no reflection segment".into())
    })?;
    let p_int = segment_predictive_dist(params, &ex.context, trace, SegmentKind::Intermediate)?;
    let p_refl = segment_predictive_dist(params, &ex.context, trace, SegmentKind::Reflection)?;
    Ok(r_reflect(refl, &ex.y_pref, &p_int, &p_refl, rcfg)?)
}

fn sample_iou(ex: &PreferenceExample, sampled: &Trace) -> Result<Option<f64>, TrainError> {
    match &ex.m_ref {
        None => Ok(None),
        Some(m_ref) => match decode_mask(sampled, m_ref.side()) {
            Ok(m_hat) => Ok(Some(iou(&m_hat, m_ref)?)),
            // Undecodable sampled mask blocks score zero.
            Err(_) => Ok(Some(0.0)),
        },
    }
}

fn sample_r_eff(
    ex: &PreferenceExample,
    sampled: &Trace,
    rcfg: &RewardConfig,
) -> Result<f64, TrainError> {
    let m_hat = ex
        .m_ref
        .as_ref()
        .and_then(|m| decode_mask(sampled, m.side()).ok());
    Ok(r_eff(
        sampled,
        m_hat.as_ref(),
        &ex.y_pref,
        ex.m_ref.as_ref(),
        rcfg,
    )?)
}

/// Draws the Monte-Carlo traces and assembles the batch statistics.
/// `sample_tag` selects the RNG stream family (training vs evaluation).
pub fn batch_stats(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    batch: &BatchView,
    rcfg: &RewardConfig,
    tcfg: &TrainConfig,
    epoch: u32,
    sample_tag: u64,
) -> Result<(BatchStats, Vec<Vec<Trace>>), TrainError> {
    let b = batch.len();
    let s_hat = batch_log_ratios(params, reference, batch)?;
    let eta0_hat = eta0_for(params, reference, batch, tcfg)?;
    let mut c = Vec::with_capacity(b);
    for &s in &s_hat {
        c.push(weight_fn(s - eta0_hat, rcfg.w_max)?);
    }

    let mut samples: Vec<Vec<Trace>> = Vec::with_capacity(b);
    let mut r_eff_mean = Vec::with_capacity(b);
    let mut iou_mean: Vec<Option<f64>> = Vec::with_capacity(b);
    let mut r_reflect_vals = Vec::with_capacity(b);
    for (idx, ex) in batch.iter() {
        let plan = SegmentPlan::of_trace(&ex.y_pref);
        let mut traces = Vec::with_capacity(tcfg.mc_samples);
        let mut r_sum = 0.0;
        let mut iou_sum = 0.0;
        let mut has_iou = false;
        for k in 0..tcfg.mc_samples {
            let mut rng =
                rng::stream_rng(tcfg.seed, &[sample_tag, epoch as u64, idx as u64, k as u64]);
            let y_hat = crate::policy::sample(params, &ex.context, &mut rng, &plan)?;
            r_sum += sample_r_eff(ex, &y_hat, rcfg)?;
            if let Some(v) = sample_iou(ex, &y_hat)? {
                iou_sum += v;
                has_iou = true;
            }
            traces.push(y_hat);
        }
        r_eff_mean.push(r_sum / tcfg.mc_samples as f64);
        iou_mean.push(has_iou.then(|| iou_sum / tcfg.mc_samples as f64));

        let reflect = if tcfg.sampled_reflection {
            let mut sum = 0.0;
            for y_hat in &traces {
                sum += reflect_value_on(params, ex, y_hat, rcfg)?;
            }
            sum / tcfg.mc_samples as f64
        } else if has_reflection_segments(ex) {
            reflect_value_on(params, ex, &ex.y_pref, rcfg)?
        } else if rcfg.lambda_ref > 0.0 {
            return Err(TrainError::InvalidInput(format!(
                "example {} lacks intermediate/reflection segments but lambda_ref > 0",
                ex.id
            )));
        } else {
            0.0
        };
        r_reflect_vals.push(reflect);
        samples.push(traces);
    }

    let with_iou: Vec<f64> = iou_mean.iter().filter_map(|v| *v).collect();
    let b_iou = if tcfg.center_iou && !with_iou.is_empty() {
        mean(&with_iou)
    } else {
        0.0
    };
    let d: Vec<f64> = iou_mean
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            Some(iou_i) => c[i] * (1.0 - rcfg.alpha) * (iou_i - b_iou),
            None => 0.0,
        })
        .collect();

    Ok((
        BatchStats {
            s_hat,
            eta0_hat,
            c,
            b_iou,
            d,
            r_eff: r_eff_mean,
            r_reflect: r_reflect_vals,
        },
        samples,
    ))
}

/// The three ascent-direction terms of the gradient estimator, before
/// summation and clipping.
#[derive(Debug, Clone)]
pub struct GradParts {
    /// Importance-weighted preferred-trace log-likelihood term.
    pub pref: Vec<f64>,
    /// Reflection term (surrogate or REINFORCE, per config).
    pub reflect: Vec<f64>,
    /// Mask-IoU REINFORCE term.
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RktoGrad {
    /// Clipped ascent gradient.
    pub ascent: Vec<f64>,
    pub pre_clip_norm: f64,
    pub parts: GradParts,
    pub stats: BatchStats,
}

/// Full gradient estimator for one batch.
pub fn rkto_grad(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    batch: &BatchView,
    rcfg: &RewardConfig,
    tcfg: &TrainConfig,
    epoch: u32,
) -> Result<RktoGrad, TrainError> {
    let (stats, samples) = batch_stats(params, reference, batch, rcfg, tcfg, epoch, TAG_MASK_SAMPLE)?;
    let n = params.param_count();
    let b = batch.len() as f64;
    let inv_k = 1.0 / tcfg.mc_samples as f64;

    let mut pref = vec![0.0; n];
    let mut reflect = vec![0.0; n];
    let mut mask = vec![0.0; n];

    let r_eff_mean = stats.mean_r_eff();
    let reflect_baseline = stats.mean_r_reflect();

    for (slot, (_, ex)) in batch.iter().enumerate() {
        // (a) importance-weighted preferred-trace likelihood, with the
        // effectiveness reward optionally centered by its batch mean.
        let centered = if tcfg.center_r_eff {
            stats.r_eff[slot] - r_eff_mean
        } else {
            stats.r_eff[slot]
        };
        let coeff = stats.c[slot] * centered / b;
        if coeff != 0.0 {
            let g = grad_log_prob(params, &ex.context, &ex.y_pref)?;
            axpy(&mut pref, coeff, &g);
        }

        // (b) reflection term.
        if rcfg.lambda_ref > 0.0 {
            if tcfg.sampled_reflection {
                for y_hat in &samples[slot] {
                    let reward = reflect_value_on(params, ex, y_hat, rcfg)?;
                    let coeff = rcfg.lambda_ref * (reward - reflect_baseline) * inv_k / b;
                    let g = grad_log_prob_segment(
                        params,
                        &ex.context,
                        y_hat,
                        SegmentKind::Reflection,
                    )?;
                    axpy(&mut reflect, coeff, &g);
                }
            } else {
                let (_, g) = reflect_loss_and_grad(params, &ex.context, &ex.y_pref, rcfg)?;
                // Ascent on the reflection reward = descent on its loss.
                axpy(&mut reflect, -rcfg.lambda_ref / b, &g);
            }
        }

        // (c) REINFORCE correction for mask IoU, averaged over the
        // Monte-Carlo samples, with the batch-mean baseline.
        if let Some(m_ref) = &ex.m_ref {
            for y_hat in &samples[slot] {
                let iou_k = match decode_mask(y_hat, m_ref.side()) {
                    Ok(m_hat) => iou(&m_hat, m_ref)?,
                    Err(_) => 0.0,
                };
                let coeff =
                    stats.c[slot] * (1.0 - rcfg.alpha) * (iou_k - stats.b_iou) * inv_k / b;
                if coeff != 0.0 {
                    let g =
                        grad_log_prob_segment(params, &ex.context, y_hat, SegmentKind::Mask)?;
                    axpy(&mut mask, coeff, &g);
                }
            }
        }
    }

    let mut ascent = vec![0.0; n];
    axpy(&mut ascent, 1.0, &pref);
    axpy(&mut ascent, 1.0, &reflect);
    axpy(&mut ascent, 1.0, &mask);
    let pre_clip_norm = l2_norm(&ascent);
    clip_l2norm(&mut ascent, tcfg.grad_clip);

    Ok(RktoGrad {
        ascent,
        pre_clip_norm,
        parts: GradParts {
            pref,
            reflect,
            mask,
        },
        stats,
    })
}
