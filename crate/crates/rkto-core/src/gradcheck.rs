//! Finite-difference verification of the analytic gradients.
//!
//! Central differences with configurable step size, compared coordinate by
//! coordinate against the analytic gradient under the hybrid relative
//! error `|a - f| / max(1, |a|, |f|)`. These suites are the independent
//! oracle for the gradient implementations; they never call into the
//! analytic backward paths.

use crate::policy::{
    grad_log_prob, log_prob, sft_loss_and_grad, Context, Init, PolicyParams, SegmentKind, Token,
    Trace,
};
use crate::rewards::{reflect_loss_and_grad, RewardConfig};
use crate::rng::{self};
use serde::{Deserialize, Serialize};

/// Central finite differences of `f` at `theta`.
pub fn central_diff<F>(mut f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(theta.len());
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        probe[i] = theta[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// `|a - b| / max(1, |a|, |b|)`: relative for large values, absolute for
/// small ones.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub instances: usize,
    pub h: f64,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub worst_coordinate: usize,
}

impl SuiteReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

fn fold_worst(report: &mut SuiteReport, instance: usize, analytic: &[f64], numeric: &[f64]) {
    for (i, (&a, &f)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_error(a, f);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst_instance = instance;
            report.worst_coordinate = i;
        }
    }
}

struct Instance {
    params: PolicyParams,
    context: Context,
    trace: Trace,
}

/// Random small instance: vocab <= 8, trace length <= 6, featurized or
/// tabular parameters. Reflect instances always carry intermediate,
/// reflection, and output segments.
fn random_instance(seed: u64, for_reflect: bool) -> Instance {
    let mut r = rng::stream_rng(seed, &[101]);
    let vocab = 4 + rng::uniform_index(&mut r, 5); // 4..=8
    let tabular = !for_reflect && rng::uniform_index(&mut r, 4) == 0;
    let tok = |r: &mut rand_chacha::ChaCha8Rng| rng::uniform_index(r, vocab) as Token;

    let segments: Vec<(SegmentKind, Vec<Token>)> = if for_reflect {
        let li = 1 + rng::uniform_index(&mut r, 2);
        let lr = 1 + rng::uniform_index(&mut r, 2);
        let lo = 1 + rng::uniform_index(&mut r, 2);
        vec![
            (
                SegmentKind::Intermediate,
                (0..li).map(|_| tok(&mut r)).collect(),
            ),
            (
                SegmentKind::Reflection,
                (0..lr).map(|_| tok(&mut r)).collect(),
            ),
            (SegmentKind::Output, (0..lo).map(|_| tok(&mut r)).collect()),
        ]
    } else {
        let len = 1 + rng::uniform_index(&mut r, 6);
        vec![(SegmentKind::Output, (0..len).map(|_| tok(&mut r)).collect())]
    };
    let trace = Trace::new(segments).expect("valid random trace");

    if tabular {
        let max_positions = trace.len();
        let params = PolicyParams::tabular(
            vocab,
            2,
            max_positions,
            Init::Seeded {
                seed: rng::mix64(seed ^ 0xA5),
                scale: 0.6,
            },
        )
        .expect("tabular params");
        let class = rng::uniform_index(&mut r, 2);
        let context = Context::new(
            vec![],
            vec![crate::policy::vocab::CONTENT_BASE + class as Token],
        )
        .expect("context");
        Instance {
            params,
            context,
            trace,
        }
    } else {
        let ctx_dim = 2 + rng::uniform_index(&mut r, 2);
        let embed_dim = 2 + rng::uniform_index(&mut r, 2);
        let params = PolicyParams::featurized(
            vocab,
            ctx_dim,
            embed_dim,
            Init::Seeded {
                seed: rng::mix64(seed ^ 0x5A),
                scale: 0.5,
            },
        )
        .expect("featurized params");
        let features: Vec<f64> = (0..ctx_dim).map(|_| rng::standard_normal(&mut r)).collect();
        let context = Context::new(features, vec![]).expect("context");
        Instance {
            params,
            context,
            trace,
        }
    }
}

fn rebuild(like: &PolicyParams, theta: &[f64]) -> PolicyParams {
    PolicyParams::new(like.vocab(), like.shape().clone(), theta.to_vec())
        .expect("rebuilt params")
}

/// Trace log-probability gradients against central differences.
pub fn check_log_prob(seed: u64, instances: usize, h: f64, inject_bug: bool) -> SuiteReport {
    let mut report = SuiteReport {
        suite: "log_prob".into(),
        instances,
        h,
        max_rel_error: 0.0,
        worst_instance: 0,
        worst_coordinate: 0,
    };
    for k in 0..instances {
        let inst = random_instance(rng::mix64(seed ^ k as u64), false);
        let mut analytic = grad_log_prob(&inst.params, &inst.context, &inst.trace).unwrap();
        if inject_bug {
            analytic[0] += 1e-3;
        }
        let numeric = central_diff(
            |theta| {
                log_prob(&rebuild(&inst.params, theta), &inst.context, &inst.trace)
                    .unwrap()
                    .total
            },
            inst.params.theta(),
            h,
        );
        fold_worst(&mut report, k, &analytic, &numeric);
    }
    report
}

/// Mean negative log-likelihood gradients against central differences.
pub fn check_sft(seed: u64, instances: usize, h: f64, inject_bug: bool) -> SuiteReport {
    let mut report = SuiteReport {
        suite: "sft_loss".into(),
        instances,
        h,
        max_rel_error: 0.0,
        worst_instance: 0,
        worst_coordinate: 0,
    };
    for k in 0..instances {
        let a = random_instance(rng::mix64(seed ^ (k as u64) << 1), false);
        // A second trace under the same parameters, for a batch of two.
        let b = random_instance(rng::mix64(seed ^ (k as u64) << 1 ^ 1), false);
        let batch_traces = [a.trace.clone(), b.trace.clone()];
        let contexts = [a.context.clone(), a.context.clone()];
        let valid_second = batch_traces[1]
            .flat_tokens()
            .all(|t| (t as usize) < a.params.vocab())
            && batch_traces[1].len() <= batch_traces[0].len();
        let batch: Vec<(&Context, &Trace)> = if valid_second {
            vec![
                (&contexts[0], &batch_traces[0]),
                (&contexts[1], &batch_traces[1]),
            ]
        } else {
            vec![(&contexts[0], &batch_traces[0])]
        };
        let (_, mut analytic) = sft_loss_and_grad(&a.params, &batch).unwrap();
        if inject_bug {
            analytic[0] += 1e-3;
        }
        let numeric = central_diff(
            |theta| {
                sft_loss_and_grad(&rebuild(&a.params, theta), &batch)
                    .unwrap()
                    .0
            },
            a.params.theta(),
            h,
        );
        fold_worst(&mut report, k, &analytic, &numeric);
    }
    report
}

/// Reflection-loss gradients against central differences. Instances whose
/// consistency KL sits near the clamp kink are skipped (the loss is not
/// differentiable exactly at the boundary).
pub fn check_reflect(seed: u64, instances: usize, h: f64, inject_bug: bool) -> SuiteReport {
    let rcfg = RewardConfig::default();
    let mut report = SuiteReport {
        suite: "reflect_loss".into(),
        instances,
        h,
        max_rel_error: 0.0,
        worst_instance: 0,
        worst_coordinate: 0,
    };
    let mut k = 0usize;
    let mut attempts = 0u64;
    while k < instances {
        attempts += 1;
        let inst = random_instance(rng::mix64(seed ^ attempts.wrapping_mul(0x9E37)), true);
        let p_int = crate::policy::segment_predictive_dist(
            &inst.params,
            &inst.context,
            &inst.trace,
            SegmentKind::Intermediate,
        )
        .unwrap();
        let p_refl = crate::policy::segment_predictive_dist(
            &inst.params,
            &inst.context,
            &inst.trace,
            SegmentKind::Reflection,
        )
        .unwrap();
        let kl = crate::numerics::kl_divergence(&p_int, &p_refl).unwrap();
        if (kl - 1.0).abs() < 0.05 {
            continue;
        }
        let (_, mut analytic) =
            reflect_loss_and_grad(&inst.params, &inst.context, &inst.trace, &rcfg).unwrap();
        if inject_bug {
            analytic[0] += 1e-3;
        }
        let numeric = central_diff(
            |theta| {
                reflect_loss_and_grad(
                    &rebuild(&inst.params, theta),
                    &inst.context,
                    &inst.trace,
                    &rcfg,
                )
                .unwrap()
                .0
            },
            inst.params.theta(),
            h,
        );
        fold_worst(&mut report, k, &analytic, &numeric);
        k += 1;
    }
    report
}

/// Runs all three suites at one step size.
pub fn run_all(seed: u64, instances: usize, h: f64, inject_bug: bool) -> Vec<SuiteReport> {
    vec![
        check_log_prob(seed, instances, h, inject_bug),
        check_sft(seed, instances, h, inject_bug),
        check_reflect(seed, instances, h, inject_bug),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_at_default_step() {
        for report in run_all(7, 12, 1e-5, false) {
            assert!(
                report.passes(1e-5),
                "{}: max rel error {}",
                report.suite,
                report.max_rel_error
            );
        }
    }

    #[test]
    fn injected_bug_is_detected_and_located() {
        let report = check_log_prob(7, 4, 1e-5, true);
        assert!(!report.passes(1e-5));
        assert_eq!(report.worst_coordinate, 0);
    }

    #[test]
    fn central_diff_on_quadratic() {
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let g = central_diff(f, &[2.0, -1.0], 1e-5);
        assert!(rel_error(g[0], 1.0) < 1e-8);
        assert!(rel_error(g[1], 6.0) < 1e-8);
    }
}
