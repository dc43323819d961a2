// Scratch probe for the RKTO-vs-SFT trend (deleted before release).

use rkto_core::policy::{Init, PolicyParams};
use rkto_core::rewards::RewardConfig;
use rkto_core::synthdata::{generate_dataset, GenConfig, PreferenceExample};
use rkto_core::trainer::{evaluate, run_training, TrainConfig};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn pool(seed: u64) -> (Vec<PreferenceExample>, Vec<PreferenceExample>) {
    // One fixed generator; a fixed held-out set; nested training subsets.
    let gen = GenConfig {
        total: 5200,
        grid_side: 3,
        seed,
        teacher_sharpness: env("SHARP", 2.0),
        vocab: env("VOCAB", 16),
        seg_output: env("OUT_LEN", 4),
        output_outlier_fraction: env("OUTLIER", 0.0),
        mask_noise_fraction: env("MASK_NOISE", 0.0),
        ..GenConfig::default()
    };
    let (examples, _, _) = generate_dataset(&gen).unwrap();
    let desired: Vec<_> = examples.into_iter().filter(|e| e.desired).collect();
    let val: Vec<_> = desired[..500].to_vec();
    let train: Vec<_> = desired[500..].to_vec();
    (train, val)
}

fn train_and_score(
    train: &[PreferenceExample],
    val: &[PreferenceExample],
    sft_epochs: u32,
    rkto_epochs: u32,
    seed: u64,
) -> (f64, std::time::Duration) {
    let tcfg = TrainConfig {
        sft_epochs,
        rkto_epochs,
        sft_lr: env("SFT_LR", 0.05),
        rkto_lr: env("RKTO_LR", 0.02),
        center_r_eff: env("CENTER", false),
        snapshot_interval: env("SNAP", 1),
        mc_samples: env("MC", 3),
        seed,
        ..TrainConfig::default()
    };
    let rcfg = RewardConfig {
        embed_dim: env("EMBED", 16),
        ..RewardConfig::default()
    };
    let init = PolicyParams::featurized(env("VOCAB", 16), 8, 8, Init::Seeded { seed: seed ^ 42, scale: 0.1 }).unwrap();
    let t0 = std::time::Instant::now();
    let out = run_training(init, train, val, &rcfg, &tcfg).unwrap();
    // Low-noise final evaluation.
    let mut eval_cfg = tcfg.clone();
    eval_cfg.mc_samples = 16;
    let summary = evaluate(
        &out.state.params,
        &out.state.reference,
        val,
        &rcfg,
        &eval_cfg,
        9999,
    )
    .unwrap();
    (summary.mean_r_eff, t0.elapsed())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("pair");
    let sft_e: u32 = env("SFT_E", 12);
    let rkto_e: u32 = env("RKTO_E", 20);
    let seed: u64 = env("SEED", 0);
    let (train, val) = pool(seed);

    match mode {
        "pair" => {
            let subset = &train[..2000.min(train.len())];
            let (sft_only, t1) = train_and_score(subset, &val, sft_e + rkto_e, 0, seed);
            let (full, t2) = train_and_score(subset, &val, sft_e, rkto_e, seed);
            println!(
                "seed={seed} epochs={sft_e}+{rkto_e} | sft_only={sft_only:.4} full={full:.4} gain={:+.4} ({t1:?} / {t2:?})",
                full - sft_only
            );
        }
        "sizes" => {
            let mut prev = 0.0;
            for total in [500usize, 1000, 2000, 4000] {
                let subset = &train[..total];
                let (r, t) = train_and_score(subset, &val, sft_e, rkto_e, seed);
                println!(
                    "seed={seed} size={total}: final R_eff={r:.4} (delta {:+.4}) ({t:?})",
                    r - prev
                );
                prev = r;
            }
        }
        "curve" => {
            let subset = &train[..2000.min(train.len())];
            let tcfg = TrainConfig {
                sft_epochs: sft_e,
                rkto_epochs: rkto_e,
                sft_lr: env("SFT_LR", 0.05),
                rkto_lr: env("RKTO_LR", 0.02),
                center_r_eff: env("CENTER", false),
                snapshot_interval: env("SNAP", 1),
                mc_samples: env("MC", 3),
                seed,
                ..TrainConfig::default()
            };
            let rcfg = RewardConfig {
                embed_dim: env("EMBED", 16),
                ..RewardConfig::default()
            };
            let init = PolicyParams::featurized(
                env("VOCAB", 16),
                8,
                8,
                Init::Seeded { seed: seed ^ 42, scale: 0.1 },
            )
            .unwrap();
            let out = run_training(init, subset, &val, &rcfg, &tcfg).unwrap();
            let mut last_rkto: Option<&rkto_core::trainer::MetricsRecord> = None;
            for r in &out.records {
                match r.phase {
                    rkto_core::trainer::Phase::Rkto => last_rkto = Some(r),
                    rkto_core::trainer::Phase::Eval => {
                        let (b_iou, gnorm, c_train) = last_rkto
                            .map(|t| {
                                (
                                    t.b_iou.unwrap_or(-1.0),
                                    t.grad_norm.unwrap_or(-1.0),
                                    t.mean_c.unwrap_or(-1.0),
                                )
                            })
                            .unwrap_or((-1.0, -1.0, -1.0));
                        println!(
                            "epoch {:2}  val_r_eff {:.4}  val_loss {:.3}  j {:.3}  c_eval {:.3}  | train b_iou {:.3} gnorm {:.3} c {:.3}",
                            r.epoch,
                            r.mean_r_eff.unwrap(),
                            r.sft_loss.unwrap(),
                            r.j_hat.unwrap(),
                            r.mean_c.unwrap(),
                            b_iou,
                            gnorm,
                            c_train
                        );
                        last_rkto = None;
                    }
                    _ => {}
                }
            }
        }
        "parts" => {
            // L2 norms of the three gradient terms at the post-SFT policy.
            let subset = &train[..2000.min(train.len())];
            let tcfg = TrainConfig {
                sft_epochs: sft_e,
                rkto_epochs: 0,
                sft_lr: env("SFT_LR", 0.05),
                rkto_lr: env("RKTO_LR", 0.02),
                center_r_eff: env("CENTER", false),
                mc_samples: env("MC", 3),
                seed,
                ..TrainConfig::default()
            };
            let rcfg = RewardConfig {
                embed_dim: env("EMBED", 16),
                ..RewardConfig::default()
            };
            let init = PolicyParams::featurized(
                env("VOCAB", 16), 8, 8,
                Init::Seeded { seed: seed ^ 42, scale: 0.1 },
            ).unwrap();
            let out = run_training(init, subset, &val, &rcfg, &tcfg).unwrap();
            let idx: Vec<usize> = (0..64).collect();
            let batch = rkto_core::trainer::BatchView::new(subset, &idx);
            let reference = out.state.params.snapshot(0);
            let g = rkto_core::trainer::rkto_grad(
                &out.state.params, &reference, &batch, &rcfg, &tcfg, 999,
            ).unwrap();
            let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            println!(
                "norms: pref {:.4}  reflect {:.4}  mask {:.4}  | b_iou {:.3} mean_r_eff {:.3}",
                l2(&g.parts.pref), l2(&g.parts.reflect), l2(&g.parts.mask),
                g.stats.b_iou, g.stats.mean_r_eff(),
            );
        }
        "bounds" => {
            let gen = GenConfig {
                total: 2000,
                grid_side: 3,
                seed,
                teacher_sharpness: env("SHARP", 2.0),
                vocab: env("VOCAB", 16),
                seg_output: env("OUT_LEN", 4),
                output_outlier_fraction: env("OUTLIER", 0.0),
                mask_noise_fraction: env("MASK_NOISE", 0.0),
                ..GenConfig::default()
            };
            let (examples, _, teacher) = generate_dataset(&gen).unwrap();
            let desired: Vec<_> = examples.into_iter().filter(|e| e.desired).collect();
            let val: Vec<_> = desired[..500].to_vec();
            let rcfg = RewardConfig::default();
            let tcfg = TrainConfig { seed, mc_samples: 8, ..TrainConfig::default() };
            let mut modal = teacher.clone();
            for t in modal.theta_mut() {
                *t *= 10.0;
            }
            for (name, policy) in [("teacher", &teacher), ("modal", &modal)] {
                let reference = policy.snapshot(0);
                let summary = evaluate(policy, &reference, &val, &rcfg, &tcfg, 0).unwrap();
                println!("{name}: val_r_eff {:.4}", summary.mean_r_eff);
            }
        }
        other => panic!("unknown mode {other}"),
    }
}
