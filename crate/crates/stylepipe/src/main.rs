use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tracing::error;
use tracing_subscriber::EnvFilter;

use stylepipe::{Pipeline, RunConfig, Stage, StageStatus};

/// Roundtrip-translation text style transfer pipeline.
#[derive(Debug, Parser)]
#[command(name = "stylepipe", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "stylepipe.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// error, warn, info, debug or trace; RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    /// Overrides the config work directory.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Rerun stages even when their manifest is up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment, clean and deduplicate each domain corpus.
    Ingest,
    /// Translate target-domain sentences to the pivot and back.
    Roundtrip,
    /// Assemble, filter and split pseudo-parallel pairs.
    BuildDataset,
    /// Embed training targets into the retrieval index.
    Index,
    /// Mine source-to-target term mappings.
    Termbank,
    /// Write finetuning shards and the trainer manifest.
    EmitFt,
    /// Transfer the test split with every configured method.
    Infer,
    /// Score transfers with BLEU and the style classifier.
    Evaluate,
    /// Render markdown, CSV and JSON reports.
    Report,
    /// Run every stage in order.
    All,
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        match self {
            Command::Ingest => vec![Stage::Ingest],
            Command::Roundtrip => vec![Stage::Roundtrip],
            Command::BuildDataset => vec![Stage::BuildDataset],
            Command::Index => vec![Stage::Index],
            Command::Termbank => vec![Stage::Termbank],
            Command::EmitFt => vec![Stage::EmitFt],
            Command::Infer => vec![Stage::Infer],
            Command::Evaluate => vec![Stage::Evaluate],
            Command::Report => vec![Stage::Report],
            Command::All => Stage::ALL.to_vec(),
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.config.seed = seed;
    }
    let mut pipeline = Pipeline::new(cfg).with_force(cli.force);
    if let Some(dir) = &cli.work_dir {
        pipeline = pipeline.with_work_dir(dir.clone());
    }
    let mut degraded = false;
    for stage in cli.command.stages() {
        let status = pipeline.run(stage)?;
        let verb = match status {
            StageStatus::Ran { .. } => "done",
            StageStatus::Skipped { .. } => "up to date",
        };
        let mark = if status.degraded() { " (degraded)" } else { "" };
        println!("{stage}: {verb}{mark}");
        degraded |= status.degraded();
    }
    Ok(degraded)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(&cli.log_level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    match run(&cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
