//! `evdet`: generate synthetic data, train, calibrate, detect, evaluate and
//! build consensus annotations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evdet::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "evdet",
    version,
    about = "One-shot micro-event detection in multichannel signals"
)]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Writes a synthetic dataset: records, annotations and a split file.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains a detector; writes the best checkpoint and the training log.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chooses per-label thresholds maximising validation F1.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// IoU criterion (default from the configuration).
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detects events in record files or directories of records.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
    /// Scores detections against annotations.
    Evaluate {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Restrict to these record ids (comma separated).
        #[arg(long, value_delimiter = ',')]
        records: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merges several scorers' annotation files.
    Consensus {
        #[arg(long)]
        kappa: f64,
        /// Seconds per step (default: one sample at the configured rate).
        #[arg(long)]
        resolution: Option<f64>,
        /// Record duration in seconds (default: last annotated event end).
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        annotations: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Prints the full default configuration.
    Init {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    let data_dir = |o: Option<PathBuf>| o.unwrap_or_else(|| cfg.paths.data_dir.clone());
    match cli.command {
        Command::Config {
            action: ConfigAction::Init { out },
        } => {
            let json = cfg.to_json()?;
            match out {
                Some(p) => std::fs::write(p, json + "\n")?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Generate { out } => commands::generate(&cfg, &data_dir(out)),
        Command::Train { data, out } => {
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.clone());
            commands::train_cmd(&cfg, &data_dir(data), &out)
        }
        Command::Calibrate {
            checkpoint,
            data,
            delta,
            out,
        } => commands::calibrate(
            &cfg,
            &checkpoint,
            &data_dir(data),
            delta.unwrap_or(cfg.detect.calibration_delta),
            &out,
        ),
        Command::Detect {
            checkpoint,
            thresholds,
            out,
            records,
        } => commands::detect(&cfg, &checkpoint, &thresholds, &records, &out),
        Command::Evaluate {
            detections,
            annotations,
            records,
            out,
        } => commands::evaluate_cmd(&cfg, &detections, &annotations, records.as_deref(), &out),
        Command::Consensus {
            kappa,
            resolution,
            duration,
            out,
            annotations,
        } => commands::consensus(&cfg, &annotations, kappa, resolution, duration, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
