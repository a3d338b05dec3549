use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use lasro::config::parse_config;
use lasro::harness::Harness;

/// Surrogate-reward fine-tuning of few-step diffusion samplers on toy data.
#[derive(Parser)]
#[command(name = "lasro", version)]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override (wins over the config seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory; falls back to $LASRO_RUN_DIR, then io.run_dir.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the DDPM teacher and checkpoint it.
    TrainTeacher,
    /// Distill the teacher into a consistency student.
    Distill,
    /// Pre-train the latent surrogate reward against the black-box signal.
    PretrainReward,
    /// Reward fine-tune the student.
    Finetune {
        /// One of: lasro, ddpo, rwr, gors, direct, altft.
        #[arg(long)]
        method: String,
    },
    /// Run a read-only diagnostic probe.
    Analyze {
        /// One of: lipschitz, td, diversity, fidelity, tradeoff.
        #[arg(long)]
        probe: String,
        /// Method whose checkpoints to analyze (tradeoff probe).
        #[arg(long, default_value = "lasro")]
        method: String,
    },
    /// Summarize the metrics stream into report.md.
    Report,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let config_path = cli.config.context("--config PATH is required")?;
    let cfg = parse_config(&config_path)
        .with_context(|| format!("failed to load config {}", config_path.display()))?;
    let run_dir = cli
        .run_dir
        .or_else(|| std::env::var_os("LASRO_RUN_DIR").map(PathBuf::from))
        .or_else(|| cfg.io.run_dir.as_ref().map(PathBuf::from))
        .context("no run directory: pass --run-dir, set LASRO_RUN_DIR, or set io.run_dir")?;
    let harness = Harness::new(cfg, run_dir, cli.seed)?;
    match &cli.cmd {
        Cmd::TrainTeacher => harness.train_teacher()?,
        Cmd::Distill => harness.distill()?,
        Cmd::PretrainReward => harness.pretrain_reward()?,
        Cmd::Finetune { method } => harness.finetune(method)?,
        Cmd::Analyze { probe, method } => harness.analyze(probe, method)?,
        Cmd::Report => harness.report()?,
    }
    Ok(())
}
