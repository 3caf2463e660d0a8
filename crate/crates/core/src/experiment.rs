//! Config-driven pipeline stages: train, attack, evaluate, landscape,
//! report. Every stage registers its artifacts (path + checksum) in the run
//! manifest, and identical configs reproduce byte-identical checkpoints and
//! CSVs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{run_attack, AttackProvenance};
use crate::config::{prepare_data, ExperimentConfig, PreparedData};
use crate::embedders::{train, Embedder, EvalSuite, TrainReport};
use crate::error::{Error, Result};
use crate::landscape::{
    adversarial_direction, export_embeddings, finetune_direction, scan, DirectionPair,
};
use crate::nn::{build_model, load_checkpoint, save_checkpoint};
use crate::rng::{derive_seed, fnv1a64, Rng};
use crate::watermark::{benign_accuracy, per_class_accuracy, wsr};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.wmck";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const LANDSCAPE_FILE: &str = "landscape.csv";
pub const LANDSCAPE_META_FILE: &str = "landscape_meta.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub timestamp_unix: u64,
    #[serde(default)]
    pub detail: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactRecord>,
}

/// Per-run ledger of everything the pipeline produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    fn load_or_new(out_dir: &Path, config_hash: &str) -> Result<Self> {
        let path = out_dir.join(MANIFEST_FILE);
        if path.exists() {
            let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
            if manifest.config_hash != config_hash {
                return Err(Error::Integrity(format!(
                    "{} belongs to config {}, current config is {}",
                    path.display(),
                    manifest.config_hash,
                    config_hash
                )));
            }
            Ok(manifest)
        } else {
            Ok(RunManifest {
                config_hash: config_hash.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                stages: Vec::new(),
            })
        }
    }

    pub fn load(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(MANIFEST_FILE);
        Ok(serde_json::from_str(&fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?)?)
    }

    fn record_stage(
        &mut self,
        out_dir: &Path,
        stage: &str,
        detail: BTreeMap<String, String>,
        files: &[PathBuf],
    ) -> Result<()> {
        let mut artifacts = Vec::new();
        for f in files {
            let bytes = fs::read(f)?;
            let rel = f
                .strip_prefix(out_dir)
                .unwrap_or(f)
                .to_string_lossy()
                .to_string();
            artifacts.push(ArtifactRecord {
                path: rel,
                checksum: format!("{:016x}", fnv1a64(&bytes)),
            });
        }
        // re-running a stage replaces its previous record
        self.stages.retain(|s| s.stage != stage);
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            detail,
            artifacts,
        });
        fs::write(
            out_dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }

    /// Verify that every listed artifact still matches its checksum.
    pub fn verify(&self, out_dir: &Path) -> Result<()> {
        for stage in &self.stages {
            for a in &stage.artifacts {
                let bytes = fs::read(out_dir.join(&a.path)).map_err(|e| {
                    Error::Integrity(format!("missing artifact {}: {e}", a.path))
                })?;
                let actual = format!("{:016x}", fnv1a64(&bytes));
                if actual != a.checksum {
                    return Err(Error::Integrity(format!(
                        "artifact {} checksum {actual} does not match manifest {}",
                        a.path, a.checksum
                    )));
                }
            }
        }
        Ok(())
    }
}

fn eval_suite(data: &PreparedData, cfg: &ExperimentConfig) -> EvalSuite {
    EvalSuite {
        clean_test: data.clean_test.clone(),
        wm_test: data.wm_test.clone(),
        target: cfg.watermark.spec.target_label,
    }
}

fn train_report_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,clean_loss,wm_loss,ba,wsr\n");
    for r in &report.epochs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.clean_loss, r.wm_loss, r.ba, r.wsr
        ));
    }
    out
}

fn embedder_name(e: Embedder) -> &'static str {
    match e {
        Embedder::Vanilla => "vanilla",
        Embedder::Ew => "ew",
        Embedder::Cw => "cw",
        Embedder::App => "app",
    }
}

#[derive(Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub report_csv: PathBuf,
    pub report: TrainReport,
}

/// Run the configured embedder and write the checkpoint, training-report
/// CSV, and manifest entry.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutputs> {
    fs::create_dir_all(&cfg.out_dir)?;
    let data = prepare_data(cfg)?;
    let eval = eval_suite(&data, cfg);
    let mut plan = cfg.train.clone();
    plan.seed = derive_seed(cfg.seed, "train");

    let mut init_rng = Rng::stream(cfg.seed, "model-init");
    let model = build_model(&cfg.arch, data.image_shape, data.classes, &mut init_rng)?;

    // the EW scheme fine-tunes a pretrained clean model; pretrain with the
    // same schedule, watermark term off
    let start_model = if matches!(plan.embedder, Embedder::Ew) {
        let mut pre_plan = plan.clone();
        pre_plan.embedder = Embedder::Vanilla;
        pre_plan.alpha = 0.0;
        pre_plan.seed = derive_seed(cfg.seed, "ew-pretrain");
        let (pretrained, _) = train(model, &pre_plan, &data.owner_full, None, &eval)?;
        pretrained
    } else {
        model
    };

    // alpha = 0 is the no-watermark control: train on the full owner set
    let (clean_ref, wm_ref) = if plan.alpha == 0.0 {
        (&data.owner_full, None)
    } else {
        (&data.owner_clean, Some(&data.owner_wm))
    };
    let (trained, report) = train(start_model, &plan, clean_ref, wm_ref, &eval)?;

    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    let mut provenance = BTreeMap::new();
    provenance.insert("stage".to_string(), Value::String("train".to_string()));
    provenance.insert(
        "embedder".to_string(),
        Value::String(embedder_name(plan.embedder).to_string()),
    );
    provenance.insert("config_hash".to_string(), Value::String(cfg.hash()));
    save_checkpoint(&trained, cfg.seed, &checkpoint, provenance)?;

    let report_csv = cfg.out_dir.join(TRAIN_REPORT_FILE);
    fs::write(&report_csv, train_report_csv(&report))?;

    let mut manifest = RunManifest::load_or_new(&cfg.out_dir, &cfg.hash())?;
    let mut detail = BTreeMap::new();
    detail.insert("embedder".to_string(), embedder_name(plan.embedder).to_string());
    manifest.record_stage(
        &cfg.out_dir,
        "train",
        detail,
        &[checkpoint.clone(), sidecar_of(&checkpoint), report_csv.clone()],
    )?;
    Ok(TrainOutputs { checkpoint, report_csv, report })
}

fn sidecar_of(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(crate::nn::SIDECAR_SUFFIX);
    PathBuf::from(s)
}

#[derive(Debug)]
pub struct AttackOutputs {
    pub label: String,
    pub checkpoint: PathBuf,
    pub report_csv: PathBuf,
    pub final_wsr: f64,
    pub final_ba: f64,
}

/// Run every configured attack against a fresh copy of the checkpoint.
/// The checkpoint must checksum-verify or nothing runs.
pub fn run_attacks(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<AttackOutputs>> {
    fs::create_dir_all(&cfg.out_dir)?;
    let (victim, _, _) = load_checkpoint(checkpoint, true)?;
    let data = prepare_data(cfg)?;
    let eval = eval_suite(&data, cfg);

    let mut outputs = Vec::new();
    let mut files = Vec::new();
    let mut detail = BTreeMap::new();
    for (i, plan_cfg) in cfg.attacks.iter().enumerate() {
        let mut plan = plan_cfg.clone();
        plan.seed = derive_seed(cfg.seed, &format!("attack-{i}"));
        let (attacked, report) = run_attack(victim.clone(), &plan, &data.attacker, &eval)?;
        let tag = format!("{}_{i}", plan.attack.label().to_lowercase().replace('-', "_"));
        let ck_path = cfg.out_dir.join(format!("attacked_{tag}.wmck"));
        let provenance = AttackProvenance::from_plan(&plan, &report).to_value();
        save_checkpoint(&attacked, cfg.seed, &ck_path, provenance)?;
        let csv_path = cfg.out_dir.join(format!("attack_{tag}.csv"));
        let mut csv = String::from("epoch,wsr,ba\n");
        for r in &report.records {
            csv.push_str(&format!("{},{},{}\n", r.epoch, r.wsr, r.ba));
        }
        fs::write(&csv_path, csv)?;
        let last = report.records.last().expect("attack report has records");
        detail.insert(format!("attack_{i}"), report.label.clone());
        outputs.push(AttackOutputs {
            label: report.label.clone(),
            checkpoint: ck_path.clone(),
            report_csv: csv_path.clone(),
            final_wsr: last.wsr,
            final_ba: last.ba,
        });
        files.extend([ck_path.clone(), sidecar_of(&ck_path), csv_path]);
    }
    let mut manifest = RunManifest::load_or_new(&cfg.out_dir, &cfg.hash())?;
    manifest.record_stage(&cfg.out_dir, "attack", detail, &files)?;
    Ok(outputs)
}

/// Eval-mode metrics of one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub ba: f64,
    pub wsr: f64,
    pub per_class_accuracy: Vec<f64>,
}

pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MetricsDoc> {
    let (model, _, _) = load_checkpoint(checkpoint, true)?;
    let data = prepare_data(cfg)?;
    if model.num_classes() != data.classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            model.num_classes(),
            data.classes
        )));
    }
    Ok(MetricsDoc {
        ba: benign_accuracy(&model, &data.clean_test)?,
        wsr: wsr(&model, &data.wm_test, cfg.watermark.spec.target_label)?,
        per_class_accuracy: per_class_accuracy(&model, &data.clean_test)?,
    })
}

/// Evaluate and write `metrics.json` (or `metrics_<name>.json` when a name
/// is given).
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    name: Option<&str>,
) -> Result<(PathBuf, MetricsDoc)> {
    fs::create_dir_all(&cfg.out_dir)?;
    let metrics = evaluate_checkpoint(cfg, checkpoint)?;
    let file = match name {
        Some(n) => cfg.out_dir.join(format!("metrics_{n}.json")),
        None => cfg.out_dir.join(METRICS_FILE),
    };
    fs::write(&file, serde_json::to_string_pretty(&metrics)?)?;
    let mut manifest = RunManifest::load_or_new(&cfg.out_dir, &cfg.hash())?;
    let stage = match name {
        Some(n) => format!("evaluate_{n}"),
        None => "evaluate".to_string(),
    };
    manifest.record_stage(&cfg.out_dir, &stage, BTreeMap::new(), &[file.clone()])?;
    Ok((file, metrics))
}

#[derive(Debug)]
pub struct LandscapeOutputs {
    pub grid_csv: PathBuf,
    pub meta_json: PathBuf,
    pub embeddings_csv: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct LandscapeMeta {
    model_checksum: String,
    adv_norm: f64,
    ft_norm: f64,
    grid: crate::landscape::GridSpec,
    bn_samples: usize,
    ft_iters: usize,
    ft_lr: f64,
}

/// Scan the vicinity of a checkpoint and write the grid CSV, its metadata
/// sidecar, and the feature embeddings. The origin cell must agree with the
/// directly measured WSR/BA within half a point or the stage refuses to
/// write (that deviation indicates broken statistics re-estimation).
pub fn run_landscape(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<LandscapeOutputs> {
    fs::create_dir_all(&cfg.out_dir)?;
    let (model, _, meta) = load_checkpoint(checkpoint, true)?;
    let data = prepare_data(cfg)?;
    let target = cfg.watermark.spec.target_label;

    let d_adv = adversarial_direction(&model, &data.owner_wm)?;
    let d_ft = finetune_direction(
        &model,
        &data.attacker,
        cfg.landscape.ft_iters,
        cfg.landscape.ft_lr,
        derive_seed(cfg.seed, "landscape-ft"),
    )?;
    let pair = DirectionPair::new(d_adv, d_ft)?;
    let grid = scan(
        &model,
        &pair,
        &cfg.landscape.grid,
        &data.owner_clean,
        &data.clean_test,
        &data.wm_test,
        target,
    )?;

    let direct_ba = benign_accuracy(&model, &data.clean_test)?;
    let direct_wsr = wsr(&model, &data.wm_test, target)?;
    let origin = grid
        .cell(0.0, 0.0)
        .ok_or_else(|| Error::Numeric("scan grid lost its origin cell".into()))?;
    if (origin.wsr - direct_wsr).abs() > 0.005 || (origin.ba - direct_ba).abs() > 0.005 {
        return Err(Error::Numeric(format!(
            "origin cell (wsr {:.4}, ba {:.4}) deviates from direct measurement \
             (wsr {direct_wsr:.4}, ba {direct_ba:.4}) by more than half a point; \
             BatchNorm re-estimation is misconfigured",
            origin.wsr, origin.ba
        )));
    }

    let grid_csv = cfg.out_dir.join(LANDSCAPE_FILE);
    fs::write(&grid_csv, grid.to_csv())?;
    let meta_json = cfg.out_dir.join(LANDSCAPE_META_FILE);
    fs::write(
        &meta_json,
        serde_json::to_string_pretty(&LandscapeMeta {
            model_checksum: meta.checksum.clone(),
            adv_norm: grid.adv_norm,
            ft_norm: grid.ft_norm,
            grid: grid.spec.clone(),
            bn_samples: grid.bn_samples,
            ft_iters: cfg.landscape.ft_iters,
            ft_lr: cfg.landscape.ft_lr,
        })?,
    )?;
    let table = export_embeddings(&model, &data.clean_test, &data.wm_test)?;
    let embeddings_csv = cfg.out_dir.join(EMBEDDINGS_FILE);
    fs::write(&embeddings_csv, table.to_csv())?;

    let mut manifest = RunManifest::load_or_new(&cfg.out_dir, &cfg.hash())?;
    manifest.record_stage(
        &cfg.out_dir,
        "landscape",
        BTreeMap::new(),
        &[grid_csv.clone(), meta_json.clone(), embeddings_csv.clone()],
    )?;
    Ok(LandscapeOutputs { grid_csv, meta_json, embeddings_csv })
}

fn last_csv_row(path: &Path) -> Result<Vec<f64>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let line = raw
        .lines()
        .filter(|l| !l.trim().is_empty())
        .last()
        .ok_or_else(|| Error::Config(format!("{} is empty", path.display())))?;
    line.split(',')
        .map(|f| {
            f.parse::<f64>()
                .map_err(|e| Error::Config(format!("{}: bad field {f}: {e}", path.display())))
        })
        .collect()
}

/// Build the before/after summary table from one or more run manifests:
/// one row per (embedder, attack) with before/after WSR and BA, plus the
/// per-embedder average WSR drop.
pub fn run_report(manifest_paths: &[PathBuf], out_path: &Path) -> Result<PathBuf> {
    if manifest_paths.is_empty() {
        return Err(Error::Argument("report needs at least one manifest".into()));
    }
    let mut rows: Vec<(String, String, f64, f64, Option<(f64, f64)>)> = Vec::new();
    for manifest_path in manifest_paths {
        let dir = manifest_path
            .parent()
            .ok_or_else(|| Error::Argument("manifest path has no parent".into()))?;
        let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        manifest.verify(dir)?;
        let train_stage = manifest
            .stages
            .iter()
            .find(|s| s.stage == "train")
            .ok_or_else(|| Error::Config("manifest has no train stage".into()))?;
        let embedder = train_stage
            .detail
            .get("embedder")
            .cloned()
            .unwrap_or_else(|| "unknown".to_string());
        // train report row: epoch, clean_loss, wm_loss, ba, wsr
        let train_row = last_csv_row(&dir.join(TRAIN_REPORT_FILE))?;
        let (ba_before, wsr_before) = (train_row[3], train_row[4]);
        let attack_stage = manifest.stages.iter().find(|s| s.stage == "attack");
        let mut attack_rows = Vec::new();
        if let Some(stage) = attack_stage {
            for a in &stage.artifacts {
                if a.path.starts_with("attack_") && a.path.ends_with(".csv") {
                    // attack report row: epoch, wsr, ba
                    let row = last_csv_row(&dir.join(&a.path))?;
                    let label = a
                        .path
                        .trim_start_matches("attack_")
                        .trim_end_matches(".csv")
                        .to_string();
                    attack_rows.push((label, row[1], row[2]));
                }
            }
        }
        if attack_rows.is_empty() {
            rows.push((embedder, String::new(), ba_before, wsr_before, None));
        } else {
            for (label, wsr_after, ba_after) in attack_rows {
                rows.push((
                    embedder.clone(),
                    label,
                    ba_before,
                    wsr_before,
                    Some((wsr_after, ba_after)),
                ));
            }
        }
    }
    // average drop per embedder over its attacked rows
    let mut drops: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (embedder, _, _, wsr_before, after) in &rows {
        if let Some((wsr_after, _)) = after {
            let e = drops.entry(embedder.clone()).or_insert((0.0, 0));
            e.0 += wsr_before - wsr_after;
            e.1 += 1;
        }
    }
    let mut csv = String::from("embedder,attack,ba_before,wsr_before,ba_after,wsr_after,avg_drop\n");
    for (embedder, attack, ba_before, wsr_before, after) in &rows {
        let avg_drop = drops
            .get(embedder)
            .map(|(sum, n)| format!("{}", sum / *n as f64))
            .unwrap_or_default();
        match after {
            Some((wsr_after, ba_after)) => csv.push_str(&format!(
                "{embedder},{attack},{ba_before},{wsr_before},{ba_after},{wsr_after},{avg_drop}\n"
            )),
            None => csv.push_str(&format!(
                "{embedder},{attack},{ba_before},{wsr_before},,,{avg_drop}\n"
            )),
        }
    }
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out_path, csv)?;
    Ok(out_path.to_path_buf())
}

/// Convenience wrapper used by tests: train, attack, evaluate, landscape in
/// sequence with one config.
pub fn run_full_pipeline(cfg: &ExperimentConfig) -> Result<()> {
    let train_out = run_train(cfg)?;
    run_attacks(cfg, &train_out.checkpoint)?;
    run_evaluate(cfg, &train_out.checkpoint, None)?;
    run_landscape(cfg, &train_out.checkpoint)?;
    Ok(())
}
