// Scratch probe for theorem-check dynamics (deleted before release).

use rkto_core::policy::{Init, PolicyParams};
use rkto_core::rewards::RewardConfig;
use rkto_core::synthdata::{generate_dataset, GenConfig};
use rkto_core::trainer::{theorem_check, theorem_verdict, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let rkto_lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let sharp: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3.0);
    let center: bool = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(true);
    let mc: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3);
    let snap: u32 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1);
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0);

    let cfg = GenConfig {
        total: 64,
        vocab: 13,
        ctx_dim: 6,
        use_masks: false,
        seg_thinking: 0,
        seg_intermediate: 1,
        seg_reflection: 1,
        seg_output: 2,
        teacher_sharpness: sharp,
        seed,
        ..GenConfig::default()
    };
    let (data, manifest, teacher) = generate_dataset(&cfg).unwrap();
    let init = PolicyParams::tabular(
        cfg.vocab,
        cfg.n_classes(),
        manifest.segment_plan.total_len(),
        Init::Seeded { seed: seed + 100, scale: 0.5 },
    )
    .unwrap();
    let rcfg = RewardConfig::default();
    let mut tcfg = TrainConfig::default();
    tcfg.theorem_steps = 200;
    tcfg.rkto_lr = rkto_lr;
    tcfg.sft_lr = rkto_lr * 2.5;
    tcfg.center_r_eff = center;
    tcfg.mc_samples = mc;
    tcfg.snapshot_interval = snap;
    tcfg.seed = seed;

    let t0 = std::time::Instant::now();
    let out = theorem_check(init, &teacher, &data, &manifest.segment_plan, &rcfg, &tcfg).unwrap();
    let v = theorem_verdict(&out.trajectory);
    let kls: Vec<f64> = out.trajectory.iter().map(|p| p.kl_composite).collect();
    println!(
        "lr={rkto_lr} sharp={sharp} center={center} mc={mc} snap={snap} seed={seed} | init={:.4} final={:.4} ratio={:.4} frac_noninc={:.4} pass={} ({:?})",
        v.initial,
        v.final_value,
        v.final_value / v.initial,
        v.frac_nonincreasing,
        v.pass,
        t0.elapsed()
    );
    let show: Vec<String> = kls.iter().step_by(20).map(|k| format!("{k:.4}")).collect();
    println!("  traj: {}", show.join(" "));
}
