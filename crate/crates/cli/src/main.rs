//! `privsphere` command-line driver.
//!
//! Every subcommand reads a JSON run configuration; flags override single
//! configuration keys. Exit status is 0 on success, 2 on a configuration
//! error and 1 on any other failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

/// Failure of a command, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error(transparent)]
    Run(privsphere::Error),
}

impl From<privsphere::Error> for CliError {
    fn from(e: privsphere::Error) -> Self {
        match e {
            privsphere::Error::Config { key, msg } => CliError::Config { key, msg },
            other => CliError::Run(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Run(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "privsphere", version, about = "Train and audit privacy-preserving representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override one configuration key, e.g. `--set trainer.batch_size=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides `output.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir` and the output-directory environment variable.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a checkpoint and loss history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `objective.lambda_p`.
        #[arg(long)]
        lambda_p: Option<f64>,
        /// Overrides `trainer.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train and evaluate one model per privacy weight.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Overrides `objective.grid`, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        grid: Option<Vec<f64>>,
        /// Grid points trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a checkpoint: utility accuracy and the adversary suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Permutation test of whether two privacy groups share a distribution.
    Permtest {
        #[command(flatten)]
        common: Common,
        /// Test the released representation of this checkpoint instead of
        /// the standardized features.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 999)]
        permutations: usize,
        /// With more than two privacy classes, test this class against the
        /// rest.
        #[arg(long)]
        positive_class: Option<usize>,
    },
    /// Fit the linear discriminant projection baseline.
    Duca {
        #[command(flatten)]
        common: Common,
        /// Overrides `objective.lambda_p`.
        #[arg(long)]
        lambda_p: Option<f64>,
        /// Overrides `model.projection_dim`.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Write the configured synthetic dataset as CSV.
    GenSynth {
        #[command(flatten)]
        common: Common,
        /// Destination file; defaults to `synthetic.csv` in the output
        /// directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn overrides(common: &Common, extra: Vec<(&str, Option<Value>)>) -> Result<Vec<(String, Value)>, CliError> {
    let mut out = common
        .set
        .iter()
        .map(|s| config::parse_assignment(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = common.seed {
        out.push(("output.seed".into(), Value::from(seed)));
    }
    out.extend(extra.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    Ok(out)
}

fn load(common: &Common, extra: Vec<(&str, Option<Value>)>) -> Result<config::RunConfig, CliError> {
    config::load(&common.config, &overrides(common, extra)?, common.output.as_deref())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, lambda_p, epochs } => {
            let cfg = load(
                &common,
                vec![
                    ("objective.lambda_p", lambda_p.map(Value::from)),
                    ("trainer.epochs", epochs.map(Value::from)),
                ],
            )?;
            commands::train(&cfg)
        }
        Command::Sweep { common, grid, jobs } => {
            let cfg = load(&common, vec![("objective.grid", grid.map(Value::from))])?;
            commands::sweep(&cfg, jobs)
        }
        Command::Eval { common, checkpoint } => commands::eval(&load(&common, vec![])?, &checkpoint),
        Command::Permtest {
            common,
            checkpoint,
            permutations,
            positive_class,
        } => commands::permtest(&load(&common, vec![])?, checkpoint.as_deref(), permutations, positive_class),
        Command::Duca { common, lambda_p, dim } => {
            let cfg = load(
                &common,
                vec![
                    ("objective.lambda_p", lambda_p.map(Value::from)),
                    ("model.projection_dim", dim.map(Value::from)),
                ],
            )?;
            commands::duca(&cfg)
        }
        Command::GenSynth { common, out } => commands::gen_synth(&load(&common, vec![])?, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
