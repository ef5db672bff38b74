//! `prunelab`: run attention-head pruning experiments from TOML configs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing input, 4 runtime
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};

use prunelab_cli::report::ReportStatus;
use prunelab_cli::{emit_report, run, CliError, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Multi-head attention pruning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent evaluation workers for independent traces.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy model, writing one checkpoint per epoch.
    Train(Common),
    /// Mask each head alone and test the metric change (Table 1, Fig. 1).
    AblateOne(Common),
    /// Keep one head per layer (Table 2).
    AblateLayer(Common),
    /// Greedy iterative pruning under each configured ordering (Fig. 3).
    Prune(Common),
    /// Pruning restricted to one attention kind at a time (Fig. 5).
    PruneByType(Common),
    /// Pruning traces across training checkpoints (Fig. 6).
    Dynamics(Common),
    /// Correlate ablation deltas across two eval splits (Fig. 2).
    Correlate(Common),
    /// Throughput of the original vs. a structurally pruned model (Table 3).
    SpeedBench(Common),
    /// Render a results directory as report.md.
    Report {
        /// Results directory.
        dir: PathBuf,
    },
}

fn experiment(kind: ExperimentKind, args: &Common) -> anyhow::Result<()> {
    let (mut config, _) = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.out.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))?;
    let manifest = run(kind, &config, &out, args.workers).with_context(|| format!("{kind} failed"))?;
    println!("{kind}: wrote {} files to {}", manifest.files.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let (kind, args) = match &cli.command {
        Command::Train(a) => (ExperimentKind::Train, a),
        Command::AblateOne(a) => (ExperimentKind::AblateOne, a),
        Command::AblateLayer(a) => (ExperimentKind::AblateLayer, a),
        Command::Prune(a) => (ExperimentKind::Prune, a),
        Command::PruneByType(a) => (ExperimentKind::PruneByType, a),
        Command::Dynamics(a) => (ExperimentKind::Dynamics, a),
        Command::Correlate(a) => (ExperimentKind::Correlate, a),
        Command::SpeedBench(a) => (ExperimentKind::SpeedBench, a),
        Command::Report { dir } => {
            match emit_report(dir)? {
                ReportStatus::Empty => println!("{}: {}", dir.display(), prunelab_cli::report::NOTHING_TO_REPORT),
                ReportStatus::Written(md) => print!("{md}"),
            }
            return Ok(());
        }
    };
    experiment(kind, args)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { CliError::EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<CliError>()
                .map_or(CliError::EXIT_RUNTIME, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
