mod commands;
mod config;
mod model;
mod train;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exchangeable neural ODEs: train, evaluate, sample and check set models.
#[derive(Parser)]
#[command(name = "exnode", version)]
struct Cli {
    /// Worker threads for batch parallelism.
    #[arg(long, global = true, env = "EXNODE_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config (or a previous run.json).
    Train {
        config: PathBuf,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train this many runs with consecutive seeds and summarize them.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Metrics of a checkpoint on a JSON-lines data file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Seed of the trace probes when the exact trace is too large.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw sets (cnf) or set series (tvae) from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Points per set.
        #[arg(long)]
        n: usize,
        /// Number of sets or series.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Comma-separated times (tvae only).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        times: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a property suite on fresh random models.
    Check {
        /// One of equivariance, invariance, invertibility, gradients, trace.
        suite: String,
        /// Break equivariance on purpose; the symmetry suites must then fail.
        #[arg(long)]
        sabotage: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the train/test data of a run config as JSON lines.
    Gen {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn failed(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<exnode::Error> for CliError {
    fn from(e: exnode::Error) -> Self {
        let code = match e {
            exnode::Error::Diverged { .. } | exnode::Error::NonFiniteLoss { .. } => 3,
            _ => 1,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::failed(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::failed(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::failed(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::config("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::failed(e.to_string()))?;
    match cli.command {
        Command::Train { config, out, seeds } => train::cmd_train(&config, out, seeds),
        Command::Eval { checkpoint, data, seed, out } => commands::cmd_eval(&checkpoint, &data, seed, out.as_deref()),
        Command::Sample { checkpoint, n, count, times, seed, out } => {
            commands::cmd_sample(&checkpoint, n, count, times, seed, &out)
        }
        Command::Check { suite, sabotage, seed, out } => commands::cmd_check(&suite, sabotage, seed, out.as_deref()),
        Command::Gen { config, out } => commands::cmd_gen(&config, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg.replace('\n', " "));
            ExitCode::from(e.code)
        }
    }
}
