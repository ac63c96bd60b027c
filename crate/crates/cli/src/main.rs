//! Batch analysis CLI: train small networks, then measure their reliance on
//! single activation-space directions.
//!
//! Exit codes: 0 ok, 2 config error, 3 data/IO error, 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use unitscope::error::Result;

#[derive(Parser)]
#[command(
    name = "unitscope",
    about = "Train small networks and measure their reliance on single directions in activation space",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides [output].dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt.json and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override [train].lr.
        #[arg(long)]
        lr: Option<f64>,
        /// Override [train].epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override [train].batch_size.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Override [data].corrupt_fraction.
        #[arg(long)]
        corrupt_fraction: Option<f64>,
        /// Override master_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cumulative ablation curve; writes curve.csv + curve.json, prints the
    /// normalized AUC.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to analyze.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layer scope: "hidden"/"all", "last:<k>", or "i,j,...".
        #[arg(long)]
        scope: Option<String>,
        /// Number of random orderings.
        #[arg(long)]
        orderings: Option<usize>,
        /// Clamp mode: zero | mean.
        #[arg(long)]
        clamp: Option<String>,
        /// Split to evaluate on: train | test.
        #[arg(long)]
        split: Option<String>,
        /// Ordering seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Curve evaluation points (0 = after every ablation).
        #[arg(long)]
        points: Option<usize>,
    },
    /// Variance-scaled Gaussian noise sweep; writes noise.csv + noise.json.
    Noise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated ascending variance scales.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        /// Runs per scale.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Per-unit selectivity/MI/importance report; writes report.csv +
    /// correlations.json.
    Selectivity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Quantile bins for mutual information.
        #[arg(long)]
        bins: Option<usize>,
        /// Split to analyze: train | test (default test).
        #[arg(long)]
        split: Option<String>,
        /// Clamp mode for importance deltas: zero | mean.
        #[arg(long)]
        clamp: Option<String>,
        /// Layer scope (default: the config's analysis scope).
        #[arg(long)]
        scope: Option<String>,
    },
    /// Hyperparameter sweep over the [sweep] grid; writes sweep.csv and
    /// prints Spearman(AUC, test accuracy).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Worker thread cap.
        #[arg(long)]
        jobs: Option<usize>,
        /// Subselection subset size; also writes subselect.json.
        #[arg(long)]
        subselect: Option<usize>,
        /// Subselection trials.
        #[arg(long, default_value_t = 500)]
        trials: usize,
        /// Comma-separated top-k values for subselection hit rates.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        topk: Vec<usize>,
        /// AUC probe seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train while probing ablation AUC; writes monitor.csv and prints the
    /// suggested stop epoch (or "none").
    Monitor {
        #[command(flatten)]
        common: Common,
        /// Probe cadence in epochs.
        #[arg(long)]
        probe_every: Option<usize>,
        /// AUC drop threshold.
        #[arg(long)]
        delta: Option<f64>,
        /// Consecutive violating probes before suggesting a stop.
        #[arg(long)]
        patience: Option<usize>,
    },
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            common,
            lr,
            epochs,
            batch_size,
            corrupt_fraction,
            seed,
        } => {
            let mut config = ExperimentConfig::load(&common.config)?;
            if let Some(lr) = lr {
                config.train.lr = lr;
            }
            if let Some(epochs) = epochs {
                config.train.epochs = epochs;
            }
            if let Some(batch_size) = batch_size {
                config.train.batch_size = batch_size;
            }
            if let Some(f) = corrupt_fraction {
                config.data.corrupt_fraction = Some(f);
            }
            if let Some(seed) = seed {
                config.master_seed = seed;
            }
            config.validate()?;
            commands::cmd_train(&config, common.out.as_deref())
        }
        Command::Ablate {
            common,
            checkpoint,
            scope,
            orderings,
            clamp,
            split,
            seed,
            points,
        } => {
            let config = ExperimentConfig::load(&common.config)?;
            commands::cmd_ablate(
                &config,
                &commands::AblateFlags {
                    checkpoint,
                    scope,
                    orderings,
                    clamp,
                    split,
                    seed,
                    points,
                },
                common.out.as_deref(),
            )
        }
        Command::Noise {
            common,
            checkpoint,
            scales,
            runs,
            seed,
            split,
        } => {
            let config = ExperimentConfig::load(&common.config)?;
            commands::cmd_noise(
                &config,
                &commands::NoiseFlags {
                    checkpoint,
                    scales,
                    runs,
                    seed,
                    split,
                },
                common.out.as_deref(),
            )
        }
        Command::Selectivity {
            common,
            checkpoint,
            bins,
            split,
            clamp,
            scope,
        } => {
            let config = ExperimentConfig::load(&common.config)?;
            commands::cmd_selectivity(
                &config,
                &commands::SelectivityFlags {
                    checkpoint,
                    bins,
                    split,
                    clamp,
                    scope,
                },
                common.out.as_deref(),
            )
        }
        Command::Sweep {
            common,
            jobs,
            subselect,
            trials,
            topk,
            seed,
        } => {
            let config = ExperimentConfig::load(&common.config)?;
            commands::cmd_sweep(
                &config,
                &commands::SweepFlags {
                    jobs,
                    subselect,
                    trials,
                    topk,
                    seed,
                },
                common.out.as_deref(),
            )
        }
        Command::Monitor {
            common,
            probe_every,
            delta,
            patience,
        } => {
            let config = ExperimentConfig::load(&common.config)?;
            commands::cmd_monitor(
                &config,
                &commands::MonitorFlags {
                    probe_every,
                    delta,
                    patience,
                },
                common.out.as_deref(),
            )
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
