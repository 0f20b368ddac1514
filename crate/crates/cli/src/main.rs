//! `dcd`: data generation, teacher/student training, evaluation and the
//! preset ablation.
//!
//! Exit codes: 0 success, 2 config or checkpoint mismatch, 3 training
//! divergence, 4 precondition failure, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dcd_core::fusion::Preset;
use dcd_core::train::{self, ExperimentConfig, Split};
use dcd_core::Error;

#[derive(Parser)]
#[command(name = "dcd", version, about = "Decomposed cross-modal distillation for RGB action detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML, or JSON with a .json extension). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seeds: a single seed for one run, or the first
    /// of consecutive seeds for the ablation.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/val/test splits.
    GenData(Common),
    /// Train the motion teacher.
    TrainTeacher(Common),
    /// Train a student preset.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        /// Overrides `model.preset`.
        #[arg(long)]
        preset: Option<String>,
        /// Teacher checkpoint; required by distilling presets.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score a checkpoint on a split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train a teacher and every preset for every seed; write the comparison table.
    RunAblation(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
        cfg.optim.teacher_seed = s;
    }
    Ok(cfg)
}

fn load_ablation(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        let n = cfg.seeds.len() as u64;
        cfg.seeds = (s..s + n).collect();
        cfg.optim.teacher_seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            train::gen_data(&cfg, &c.out)?;
            println!("wrote splits to {}", c.out.display());
        }
        Command::TrainTeacher(c) => {
            let cfg = load(&c)?;
            let out = train::train_teacher(&cfg, &c.out)?;
            println!(
                "teacher checkpoint {} (best val avg mAP {:.4} at epoch {})",
                out.checkpoint.display(),
                out.log.best_val_avg_map,
                out.log.best_epoch
            );
        }
        Command::TrainStudent { common, preset, teacher } => {
            let mut cfg = load(&common)?;
            if let Some(p) = preset {
                cfg = cfg.with_preset(Preset::parse(&p)?);
            }
            let seed = cfg.seeds[0];
            let out = train::train_student(&cfg, seed, teacher.as_deref(), &common.out)?;
            println!(
                "student checkpoint {} (best val avg mAP {:.4} at epoch {})",
                out.checkpoint.display(),
                out.log.best_val_avg_map,
                out.log.best_epoch
            );
        }
        Command::Evaluate { common, checkpoint, split } => {
            let cfg = load(&common)?;
            let split = Split::parse(&split)?;
            let out = train::evaluate(&checkpoint, &cfg, split, &common.out)?;
            let table = std::fs::read_to_string(common.out.join("report.txt"))?;
            print!("{table}");
            println!("{} videos, avg mAP {:.4}", out.results.len(), out.report.average);
        }
        Command::RunAblation(c) => {
            let cfg = load_ablation(&c)?;
            let report = train::run_ablation(&cfg, &c.out)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Checkpoint(_)) => 2,
        Some(Error::Divergence { .. }) => 3,
        Some(Error::Precondition(_) | Error::Modality { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("dcd failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
