//! `tenet`: train, evaluate and apply principle-based expert ensembles.
//!
//! Exit codes: 0 success, 2 input or schema error, 3 provider error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tenet_core::clustering::ClusterError;
use tenet_core::gateway::GatewayError;
use tenet_core::optimizer::OptimizerError;

use config::{GatewayMode, Overrides, Resolved};

#[derive(Debug, Parser)]
#[command(name = "tenet", version, about = "Principle-based prompt experts for text classification")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the deterministic mock oracle for every model role.
    #[arg(long, global = true)]
    mock: bool,
    /// Serve every request from a recorded transcript.
    #[arg(long, global = true, value_name = "TRANSCRIPT")]
    replay: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Output directory for splits, ensembles, reports and transcripts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train/val/test JSONL splits.
    Split,
    /// Cluster the training split and report silhouettes per candidate k.
    Cluster,
    /// Train one expert per cluster and write the ensemble.
    Train {
        /// Continue from checkpoints left by an interrupted run.
        #[arg(long)]
        resume: bool,
    },
    /// Score an ensemble on labelled data (the test split by default).
    Eval {
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Label unlabelled inputs, recording the routed expert per row.
    Predict {
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pretty-print an ensemble's constitutions.
    Inspect {
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
}

fn is_provider_error(e: &GatewayError) -> bool {
    !matches!(e, GatewayError::Config(_) | GatewayError::Io(_) | GatewayError::EmptyInput)
}

fn cluster_is_provider(e: &ClusterError) -> bool {
    matches!(e, ClusterError::Gateway(g) if is_provider_error(g))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let provider = err.chain().any(|cause| {
        if let Some(g) = cause.downcast_ref::<GatewayError>() {
            return is_provider_error(g);
        }
        if let Some(c) = cause.downcast_ref::<ClusterError>() {
            return cluster_is_provider(c);
        }
        match cause.downcast_ref::<OptimizerError>() {
            Some(OptimizerError::Gateway(g)) => is_provider_error(g),
            Some(OptimizerError::Cluster(c)) => cluster_is_provider(c),
            _ => false,
        }
    });
    if provider {
        3
    } else {
        2
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mode = GatewayMode {
        mock: cli.mock,
        replay: cli.replay.clone(),
        append_transcript: false,
    };
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out.clone(),
        cache_dir: cli.cache_dir.clone(),
    };
    let resolve = || -> anyhow::Result<Resolved> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("--config is required for this command"))?;
        Resolved::load(path, &overrides)
    };
    match &cli.command {
        Command::Split => commands::split(&resolve()?),
        Command::Cluster => commands::cluster(&resolve()?, &mode),
        Command::Train { resume } => commands::train(&resolve()?, &mode, *resume),
        Command::Eval { ensemble, data } => commands::eval(&resolve()?, &mode, ensemble.as_deref(), data.as_deref()),
        Command::Predict {
            ensemble,
            input,
            output,
        } => commands::predict(&resolve()?, &mode, ensemble.as_deref(), input, output.as_deref()),
        Command::Inspect { ensemble } => {
            let path = match ensemble {
                Some(p) => p.clone(),
                None => resolve()?.out_dir.join("ensemble.json"),
            };
            commands::inspect(&path)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
