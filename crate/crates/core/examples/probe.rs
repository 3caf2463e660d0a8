// Per-epoch trace of one APP run, for diagnosing training collapses.
// usage: probe <seed> <alpha> <eps> <m> <epochs>

use wmlab_core::data::{builtin_shapes, split_owner_attacker, SplitRole};
use wmlab_core::embedders::{train_app, Embedder, EvalSuite, TrainPlan};
use wmlab_core::nn::build_model;
use wmlab_core::rng::Rng;
use wmlab_core::watermark::{
    build_watermarked_trainset, watermark_testset, WatermarkKind, WatermarkSpec,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let num = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let seed = num(1, 1.0) as u64;
    let alpha = num(2, 0.15);
    let eps = num(3, 0.01);
    let m = num(4, 16.0) as usize;
    let epochs = num(5, 30.0) as usize;

    let data_seed = 7777u64;
    let pool = builtin_shapes(5, 2000, 16, data_seed ^ 1, SplitRole::OwnerTrain).unwrap();
    let test = builtin_shapes(5, 1000, 16, data_seed ^ 2, SplitRole::Test).unwrap();
    let (owner, _attacker) = split_owner_attacker(&pool, 0.8, data_seed).unwrap();
    let spec = WatermarkSpec {
        kind: WatermarkKind::Noise { amplitude: 0.25 },
        target_label: 0,
        seed: data_seed,
    };
    let (clean_part, wm_part) = build_watermarked_trainset(&owner, &spec, 0.04).unwrap();
    let wm_test = watermark_testset(&test, &spec).unwrap();
    let eval = EvalSuite { clean_test: test, wm_test, target: 0 };

    let mut plan = TrainPlan::with_embedder(Embedder::App, seed);
    plan.alpha = alpha;
    plan.epsilon = eps;
    plan.batch_wm = m;
    plan.epochs = epochs;
    plan.lr.milestones = vec![epochs / 2, epochs * 3 / 4];
    let mut rng = Rng::stream(seed, "init");
    let model = build_model("tinycnn", (1, 16, 16), 5, &mut rng).unwrap();
    let (trained, report) = train_app(model, &plan, &clean_part, &wm_part, &eval).unwrap();
    for r in &report.epochs {
        println!(
            "epoch {:2}  clean {:.4}  wm {:.4}  ba {:.3}  wsr {:.3}",
            r.epoch, r.clean_loss, r.wm_loss, r.ba, r.wsr
        );
    }
    println!("param norm {:.3}  skips {}", trained.param_l2_norm(), report.perturbation_skips);
}
