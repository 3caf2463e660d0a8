// Landscape-scan probe for the two desk models (vanilla vs app):
// crossing comparison along beta = 0 plus wall-clock measurement.

use wmlab_core::data::{builtin_shapes, split_owner_attacker, SplitRole};
use wmlab_core::embedders::{train, Embedder, EvalSuite, TrainPlan};
use wmlab_core::landscape::{
    adversarial_direction, finetune_direction, scan, DirectionPair, GridSpec,
};
use wmlab_core::nn::{build_model, LrSchedule};
use wmlab_core::rng::Rng;
use wmlab_core::watermark::{
    build_watermarked_trainset, watermark_testset, WatermarkKind, WatermarkSpec,
};

fn main() {
    let data_seed = 7777u64;
    let seed = 1u64;
    let pool = builtin_shapes(5, 2000, 16, data_seed ^ 1, SplitRole::OwnerTrain).unwrap();
    let test = builtin_shapes(5, 1000, 16, data_seed ^ 2, SplitRole::Test).unwrap();
    let (owner, attacker) = split_owner_attacker(&pool, 0.8, data_seed).unwrap();
    let spec = WatermarkSpec {
        kind: WatermarkKind::Noise { amplitude: 0.25 },
        target_label: 3,
        seed: data_seed,
    };
    let (clean_part, wm_part) = build_watermarked_trainset(&owner, &spec, 0.07).unwrap();
    let wm_test = watermark_testset(&test, &spec).unwrap();
    let eval = EvalSuite { clean_test: test.clone(), wm_test: wm_test.clone(), target: 3 };

    let mut vanilla_plan = TrainPlan::with_embedder(Embedder::Vanilla, seed);
    vanilla_plan.alpha = 0.6;
    vanilla_plan.batch_wm = 2;
    vanilla_plan.epochs = 34;
    vanilla_plan.lr = LrSchedule { initial: 0.05, milestones: vec![17, 25], factor: 0.1 };
    vanilla_plan.warmup_epochs = 20;
    vanilla_plan.final_bn_recalibration = true;

    let mut app_plan = TrainPlan::with_embedder(Embedder::App, seed);
    app_plan.alpha = 0.1;
    app_plan.epsilon = 0.015;
    app_plan.batch_wm = 64;
    app_plan.epochs = 30;
    app_plan.lr = LrSchedule { initial: 0.05, milestones: vec![15, 22], factor: 0.1 };
    app_plan.warmup_epochs = 3;
    app_plan.final_bn_recalibration = true;

    for (name, plan) in [("vanilla", vanilla_plan), ("app", app_plan)] {
        let mut rng = Rng::stream(seed, "init");
        let model = build_model("tinycnn", (1, 16, 16), 5, &mut rng).unwrap();
        let t0 = std::time::Instant::now();
        let (trained, report) =
            train(model, &plan, &clean_part, Some(&wm_part), &eval).unwrap();
        let last = report.epochs.last().unwrap();
        println!(
            "{name}: trained {:.0}s ba {:.3} wsr {:.3}",
            t0.elapsed().as_secs_f64(),
            last.ba,
            last.wsr
        );

        let d_adv = adversarial_direction(&trained, &wm_part).unwrap();
        let d_ft = finetune_direction(&trained, &attacker, 40, 0.05, 99).unwrap();
        println!(
            "{name}: |d_adv| {:.4} |d_ft| {:.4} |d_ft|/|theta| {:.4}",
            d_adv.l2_norm(),
            d_ft.l2_norm(),
            d_ft.l2_norm() / trained.param_l2_norm()
        );
        let pair = DirectionPair::new(d_adv, d_ft).unwrap();
        let t1 = std::time::Instant::now();
        let grid = scan(
            &trained,
            &pair,
            &GridSpec::default(),
            &clean_part,
            &test,
            &wm_test,
            3,
        )
        .unwrap();
        let origin = grid.cell(0.0, 0.0).unwrap();
        println!(
            "{name}: scan {:.0}s cells {} origin wsr {:.4} ba {:.4} crossing {:?}",
            t1.elapsed().as_secs_f64(),
            grid.cells.len(),
            origin.wsr,
            origin.ba,
            grid.smallest_alpha_below(0.5)
        );
        let line: Vec<(f64, f64)> = grid
            .cells
            .iter()
            .filter(|c| c.beta == 0.0)
            .map(|c| (c.alpha, c.wsr))
            .collect();
        println!("{name}: beta=0 line: {line:?}");
    }
}
