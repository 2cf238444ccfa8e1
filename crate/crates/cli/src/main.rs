//! `cfrl`: dataset generation, model training, counterfactual augmentation,
//! policy learning and reporting, one subcommand per stage. Every stage
//! reads and extends `<out-dir>/manifest.json`.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};

use crate::commands::Run;
use crate::manifest::MANIFEST_FILE;

#[derive(Parser)]
#[command(name = "cfrl", version, about = "Counterfactual data augmentation for offline reinforcement learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark dataset and start a run directory.
    GenData(GenArgs),
    /// Train the SCM or baseline dynamics model for every subset and seed.
    Train(StageArgs),
    /// Write counterfactually augmented datasets.
    Augment(StageArgs),
    /// Learn policies on the augmented data and write metrics.
    Policy(StageArgs),
    /// Aggregate metrics across seeds into summary tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Experiment config, TOML or JSON.
    #[arg(long)]
    config: PathBuf,
    /// Run only this training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct StageArgs {
    /// Must match the config the run was generated with.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict the stage to one of the run's seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Accepted for symmetry with the other stages; the manifests carry
    /// their own configs.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where `report/` is written; also the default run to summarize.
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Run manifests to aggregate.
    manifests: Vec<PathBuf>,
}

fn open(args: &StageArgs) -> Result<Run> {
    let cfg = args.config.as_deref().map(config::load_config).transpose()?;
    Run::open(&args.out_dir, cfg, args.seed).with_context(|| format!("opening run {}", args.out_dir.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::GenData(a) => {
            let mut cfg = config::load_config(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seeds = vec![s];
            }
            commands::gen_data(cfg, &a.out_dir)?;
        }
        Command::Train(a) => commands::train(&mut open(&a)?)?,
        Command::Augment(a) => commands::augment(&mut open(&a)?)?,
        Command::Policy(a) => commands::policy(&mut open(&a)?)?,
        Command::Report(a) => {
            let manifests = if a.manifests.is_empty() { vec![a.out_dir.join(MANIFEST_FILE)] } else { a.manifests };
            commands::report(&manifests, &a.out_dir)?;
        }
    }
    Ok(())
}
