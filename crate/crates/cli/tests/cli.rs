//! Black-box tests of the wmlab binary: argument surface, exit codes, and a
//! small train -> evaluate -> report round trip.

use std::fs;
use std::path::Path;
use std::process::Command;

fn wmlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wmlab"))
}

fn write_quick_config(dir: &Path, out_dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "schema_version": 1,
        "seed": 5,
        "out_dir": out_dir,
        "dataset": {"kind": "builtin", "classes": 5, "train": 300, "test": 120, "image_size": 16},
        "watermark": {"kind": "noise", "amplitude": 0.3, "target_label": 0, "seed": 5, "fraction": 0.05},
        "train": {
            "embedder": "vanilla",
            "epochs": 3,
            "batch_wm": 2,
            "alpha": 0.3,
            "lr": {"initial": 0.03, "milestones": [2], "factor": 0.1},
            "seed": 5
        },
        "attacks": [
            {"attack": "ft", "epochs": 1, "lr": {"initial": 0.01, "milestones": [], "factor": 0.5}}
        ]
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn help_lists_all_subcommands() {
    let out = wmlab().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["train", "attack", "evaluate", "landscape", "report"] {
        assert!(text.contains(sub), "missing subcommand {sub} in help");
    }
}

#[test]
fn missing_config_exits_with_code_two() {
    let out = wmlab()
        .args(["train", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_with_code_two_and_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        serde_json::to_string(&serde_json::json!({
            "schema_version": 1,
            "seed": 1,
            "out_dir": dir.path().join("out"),
            "dataset": {"kind": "builtin"},
            "watermark": {"kind": "noise", "amplitude": 0.2, "target_label": 0, "seed": 1, "fraction": 2.0},
            "train": {"embedder": "vanilla", "seed": 1}
        }))
        .unwrap(),
    )
    .unwrap();
    let out = wmlab()
        .args(["train", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("watermark.fraction"), "stderr: {stderr}");
}

#[test]
fn train_evaluate_attack_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_quick_config(dir.path(), &out_dir);

    let train = wmlab()
        .args(["train", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        train.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&train.stderr)
    );
    let checkpoint = out_dir.join("checkpoint.wmck");
    assert!(checkpoint.exists());

    let evaluate = wmlab()
        .args([
            "evaluate",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            checkpoint.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(evaluate.status.success());
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["ba"].is_number());
    assert!(metrics["wsr"].is_number());
    assert_eq!(metrics["per_class_accuracy"].as_array().unwrap().len(), 5);

    let attack = wmlab()
        .args([
            "attack",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            checkpoint.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(attack.status.success());

    let summary = dir.path().join("summary.csv");
    let report = wmlab()
        .args([
            "report",
            "--manifest",
            out_dir.join("manifest.json").to_str().unwrap(),
            "--out",
            summary.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        report.status.success(),
        "report failed: {}",
        String::from_utf8_lossy(&report.stderr)
    );
    let table = fs::read_to_string(&summary).unwrap();
    assert!(table.starts_with("embedder,attack,ba_before,wsr_before,ba_after,wsr_after,avg_drop"));
    assert!(table.lines().count() >= 2);
}

#[test]
fn attack_on_corrupted_checkpoint_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_quick_config(dir.path(), &out_dir);
    let train = wmlab()
        .args(["train", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(train.status.success());
    let checkpoint = out_dir.join("checkpoint.wmck");
    let mut bytes = fs::read(&checkpoint).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&checkpoint, bytes).unwrap();

    let attack = wmlab()
        .args([
            "attack",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            checkpoint.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(attack.status.code(), Some(4));
}

#[test]
fn seed_override_changes_artifacts_and_same_seed_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");
    let config = write_quick_config(dir.path(), &dir.path().join("unused"));

    for (out, seed) in [(&out_a, "5"), (&out_b, "5"), (&out_c, "6")] {
        let run = wmlab()
            .args([
                "train",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--seed",
                seed,
            ])
            .output()
            .unwrap();
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let a = fs::read(out_a.join("checkpoint.wmck")).unwrap();
    let b = fs::read(out_b.join("checkpoint.wmck")).unwrap();
    let c = fs::read(out_c.join("checkpoint.wmck")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical checkpoints");
    assert_ne!(a, c, "different seeds must give different checkpoints");
}
