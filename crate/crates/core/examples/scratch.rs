// Scratch driver for tuning desk-scale defaults; not part of the test suite.
// usage: scratch <which: vanilla|app|nocbn|all> <seed> <transparency> <scale> <pos> <alpha>

use wmlab_core::attacks::{attack_ft, AttackKind, AttackPlan};
use wmlab_core::data::{builtin_shapes, split_owner_attacker, SplitRole};
use wmlab_core::embedders::{train, Embedder, EvalSuite, TrainPlan};
use wmlab_core::nn::build_model;
use wmlab_core::rng::Rng;
use wmlab_core::watermark::{
    build_watermarked_trainset, watermark_testset, WatermarkKind, WatermarkSpec,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).cloned().unwrap_or_else(|| "all".into());
    let num = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let seed = num(2, 7.0) as u64;
    let transparency = num(3, 1.0);
    let scale = num(4, 1.0);
    let pos = num(5, 1.0) as usize;
    let alpha = num(6, 1.0);
    let fraction = num(7, 0.01);

    let pool = builtin_shapes(5, 2000, 16, seed ^ 1, SplitRole::OwnerTrain).unwrap();
    let test = builtin_shapes(5, 1000, 16, seed ^ 2, SplitRole::Test).unwrap();
    let (owner, attacker) = split_owner_attacker(&pool, 0.8, seed).unwrap();
    let spec = if transparency < 0.0 {
        // negative transparency selects the noise trigger; |value| = amplitude
        WatermarkSpec {
            kind: WatermarkKind::Noise { amplitude: -transparency },
            target_label: 0,
            seed,
        }
    } else {
        WatermarkSpec {
            kind: WatermarkKind::Content { transparency, scale, position: (pos, pos) },
            target_label: 0,
            seed,
        }
    };
    let (clean_part, wm_part) = build_watermarked_trainset(&owner, &spec, fraction).unwrap();
    let wm_test = watermark_testset(&test, &spec).unwrap();
    let eval = EvalSuite { clean_test: test.clone(), wm_test, target: 0 };
    println!("cfg: t={transparency} s={scale} pos={pos} alpha={alpha} frac={fraction} seed={seed}");

    let runs: Vec<(&str, Embedder, bool)> = match which.as_str() {
        "vanilla" => vec![("vanilla", Embedder::Vanilla, true)],
        "app" => vec![("app", Embedder::App, true)],
        "nocbn" => vec![("app-nocbn", Embedder::App, false)],
        _ => vec![
            ("vanilla", Embedder::Vanilla, true),
            ("app", Embedder::App, true),
            ("app-nocbn", Embedder::App, false),
        ],
    };

    for (name, embedder, cbn) in runs {
        let mut plan = TrainPlan::with_embedder(embedder, seed);
        plan.alpha = alpha;
        plan.cbn = cbn;
        let mut rng = Rng::stream(seed, "init");
        let model = build_model("tinycnn", (1, 16, 16), 5, &mut rng).unwrap();
        let t1 = std::time::Instant::now();
        let (trained, report) = train(model, &plan, &clean_part, Some(&wm_part), &eval).unwrap();
        let last = report.epochs.last().unwrap();
        println!(
            "{name:10} trained {:5.1}s  ba {:.3} wsr {:.3}  skips {}  ratios {}",
            t1.elapsed().as_secs_f64(),
            last.ba,
            last.wsr,
            report.perturbation_skips,
            report.budget_ratios.len(),
        );

        let ft = AttackPlan::new(AttackKind::Ft, seed + 100);
        let (_, att) = attack_ft(trained, &ft, &attacker, &eval).unwrap();
        print!("{name:10} FT traj:");
        for r in &att.records {
            print!(" {:.2}/{:.2}", r.wsr, r.ba);
        }
        println!();
    }
}
