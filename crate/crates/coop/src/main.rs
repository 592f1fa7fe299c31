//! Command-line experiment driver.
//!
//! Verbs: `train`, `eval`, `sweep`, `report`. Exit codes: 0 success,
//! 2 configuration error, 3 numerical failure.

use clap::{Parser, Subcommand};
use coop::config::ExperimentConfig;
use coop::model::EvalMode;
use coop::runner::{self, RunError, SweepAxis};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "coop",
    about = "Cooperative BEV detection experiments: train, evaluate, sweep, report"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint + loss curve to the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/latest")]
        run_dir: PathBuf,
    },
    /// Evaluate a checkpoint; writes an AP + communication report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// no_fusion | late_fusion | coop | coop_no_sqm
        #[arg(long)]
        mode: String,
        #[arg(long, default_value = "runs/latest")]
        run_dir: PathBuf,
    },
    /// Sweep one axis (n_q retrains; mu, noise, budget reuse the checkpoint).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// n_q | mu | noise | budget
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "runs/latest")]
        run_dir: PathBuf,
    },
    /// Summarize every report found in a run directory.
    Report {
        #[arg(long, default_value = "runs/latest")]
        run_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.cmd {
        Cmd::Train { config, run_dir } => {
            let cfg = ExperimentConfig::from_toml_path(&config)?;
            let out = runner::run_train(&cfg, &run_dir)?;
            let last = out.curve.last().expect("at least one step");
            println!(
                "trained {} epochs ({} steps); final loss {:.4}; checkpoint {}",
                cfg.training.epochs,
                out.curve.len(),
                last.total,
                out.checkpoint.display()
            );
        }
        Cmd::Eval { config, checkpoint, mode, run_dir } => {
            let cfg = ExperimentConfig::from_toml_path(&config)?;
            let mode: EvalMode = mode
                .parse()
                .map_err(|e: String| RunError::Config(coop::config::ConfigError::Invalid(e)))?;
            let report = runner::run_eval(&cfg, &checkpoint, mode, &run_dir)?;
            println!("[{}] {} scenes", report.mode, report.scenes);
            for (t, ap) in &report.ap {
                println!("  AP@{t:.1} = {ap:.4}");
            }
            println!(
                "  comm: {} B total, {:.1} B/frame mean, log2 mean {}",
                report.total_bytes,
                report.mean_bytes,
                report
                    .mean_log2_bytes
                    .map_or("n/a".to_string(), |l| format!("{l:.3}")),
            );
        }
        Cmd::Sweep { config, checkpoint, axis, run_dir } => {
            let cfg = ExperimentConfig::from_toml_path(&config)?;
            let axis: SweepAxis = axis
                .parse()
                .map_err(|e: String| RunError::Config(coop::config::ConfigError::Invalid(e)))?;
            let rows = runner::run_sweep(&cfg, &checkpoint, axis, &run_dir)?;
            println!("setting,ap50,mean_bytes");
            for r in &rows {
                println!("{},{:.4},{:.1}", r.setting, r.ap50, r.mean_bytes);
            }
        }
        Cmd::Report { run_dir } => {
            let mut stdout = std::io::stdout();
            runner::run_report(&run_dir, &mut stdout)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
