//! Command-line experiment runner: train, attack, evaluate, landscape, and
//! report subcommands over one JSON config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric or training
//! failure, 4 integrity (checksum) failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wmlab_core::config::ExperimentConfig;
use wmlab_core::error::Error;
use wmlab_core::experiment;

#[derive(Parser)]
#[command(
    name = "wmlab",
    version,
    about = "Backdoor watermark robustness laboratory",
    long_about = "Config-driven experiments around backdoor-based model watermarking: \
                  embed watermarks (vanilla / ew / cw / app), run removal attacks \
                  (ft / fp / anp-lite), evaluate WSR and benign accuracy, and scan the \
                  parameter-space vicinity of a checkpoint."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured embedder; writes checkpoint + report CSV.
    Train(CommonArgs),
    /// Run every configured attack against a checkpoint.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        /// Victim checkpoint (checksum-verified before anything runs).
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint: benign accuracy, watermark success rate,
    /// per-class accuracy.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Suffix for the metrics file (metrics_<name>.json).
        #[arg(long, value_name = "NAME")]
        name: Option<String>,
    },
    /// Scan the parameter-space vicinity of a checkpoint.
    Landscape {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Summarize one or more runs into a before/after table.
    Report {
        /// Run manifests to aggregate.
        #[arg(long = "manifest", value_name = "PATH", required = true)]
        manifests: Vec<PathBuf>,
        /// Output CSV path.
        #[arg(long, value_name = "PATH", default_value = "summary.csv")]
        out: PathBuf,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn init_thread_pool() {
    // WMLAB_THREADS is the only environment knob; everything else comes from
    // the config document
    if let Ok(n) = std::env::var("WMLAB_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    init_thread_pool();
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let out = experiment::run_train(&cfg)?;
            let last = out.report.epochs.last().expect("train report has epochs");
            println!(
                "trained: ba {:.4} wsr {:.4} -> {}",
                last.ba,
                last.wsr,
                out.checkpoint.display()
            );
        }
        Command::Attack { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let outputs = experiment::run_attacks(&cfg, &checkpoint)?;
            for o in &outputs {
                println!(
                    "{}: wsr {:.4} ba {:.4} -> {}",
                    o.label,
                    o.final_wsr,
                    o.final_ba,
                    o.checkpoint.display()
                );
            }
            if outputs.is_empty() {
                println!("no attacks configured; nothing to do");
            }
        }
        Command::Evaluate { common, checkpoint, name } => {
            let cfg = load_config(&common)?;
            let (path, metrics) = experiment::run_evaluate(&cfg, &checkpoint, name.as_deref())?;
            println!(
                "ba {:.4} wsr {:.4} -> {}",
                metrics.ba,
                metrics.wsr,
                path.display()
            );
        }
        Command::Landscape { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let out = experiment::run_landscape(&cfg, &checkpoint)?;
            println!("landscape -> {}", out.grid_csv.display());
        }
        Command::Report { manifests, out } => {
            let path = experiment::run_report(&manifests, &out)?;
            println!("summary -> {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
