mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pabridge_core::evalsim::Policy;

/// Synthetic conversation-starter retrieval: data, training, evaluation and
/// feedback-loop simulation.
#[derive(Parser, Debug)]
#[command(name = "pabridge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON experiment config (sections world, train, loop, and out_dir).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed of the run (sets train.seed).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (overrides out_dir).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the world and write a starter-embedding file and an event log.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of events to log.
        #[arg(long, default_value_t = 10_000)]
        events: usize,
    },
    /// Fit the residual codebooks on logged query embeddings.
    FitRqvae {
        #[command(flatten)]
        common: Common,
        /// Event log to read (default: OUT/events.ndjson).
        #[arg(long, value_name = "PATH")]
        events_file: Option<PathBuf>,
    },
    /// Train on an event log and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Event log to read (default: OUT/events.ndjson).
        #[arg(long, value_name = "PATH")]
        events_file: Option<PathBuf>,
        /// Use these codebooks instead of fitting them during warm-up.
        #[arg(long, value_name = "PATH")]
        codebooks: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// AUC and recall@K of a checkpoint on the oracle-labelled holdout.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: OUT/checkpoint.pack).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Run the closed feedback loop and write per-round metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// closed_baseline or pa_bridge (overrides loop.policy)
        #[arg(long, value_name = "POLICY", value_parser = parse_policy)]
        policy: Option<Policy>,
    },
    /// Aggregate loop CSVs into a summary table and plot-ready series.
    Report {
        #[command(flatten)]
        common: Common,
        /// Loop CSVs (default: every loop_*.csv in OUT).
        inputs: Vec<PathBuf>,
        /// Aggregate even when runs come from different worlds.
        #[arg(long)]
        force: bool,
    },
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse::<Policy>().map_err(|e| e.to_string())
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<pabridge_core::Error> for CliError {
    fn from(e: pabridge_core::Error) -> Self {
        match e {
            pabridge_core::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(format!("csv: {e}"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PABRIDGE_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData { common, events } => commands::gen_data(&common, events),
        Command::FitRqvae { common, events_file } => commands::fit_rqvae(&common, events_file),
        Command::Train {
            common,
            events_file,
            codebooks,
            resume,
        } => commands::train(&common, events_file, codebooks, resume),
        Command::Eval { common, checkpoint } => commands::eval(&common, checkpoint),
        Command::Simulate { common, policy } => commands::simulate(&common, policy),
        Command::Report { common, inputs, force } => report::report(&common, inputs, force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("see `pabridge --help` for usage");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
