//! `armforest` command-line interface.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::PipelineFlags;

#[derive(Debug, Parser)]
#[command(name = "armforest", version, about = "Many-arm treatment assignment forests")]
struct Cli {
    /// Worker threads; changes wall-clock time only.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the simulation experiment and write one CSV row per replication and method.
    Simulate(SimulateArgs),
    /// Train a pipeline and save the model JSON.
    Fit(FitArgs),
    /// Assign arms to covariate rows with a saved model.
    Assign(AssignArgs),
    /// IPW policy value of a saved model on labeled data.
    Evaluate(EvaluateArgs),
    /// Grid search by cross-validated policy value.
    Tune(TuneArgs),
    /// Normal-model closed forms against Monte Carlo.
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long)]
    out: PathBuf,
    /// Run only the oracle, random, control and best-fixed-arm policies.
    #[arg(long)]
    reference_only: bool,
    #[arg(long)]
    replications: Option<usize>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write y, baseline and residual per training row.
    #[arg(long)]
    dump_residuals: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AssignArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// JSON report; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long)]
    input: PathBuf,
    /// Score table CSV; the best configuration goes to the sidecar JSON.
    #[arg(long)]
    out: PathBuf,
    /// Cross-validation folds for scoring.
    #[arg(long)]
    cv_folds: Option<usize>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    draws: Option<usize>,
}

/// A configuration that parses but is unusable, or fails to parse.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Exit codes, one per failure class.
pub mod exit {
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const DATA: u8 = 4;
    pub const CONFIG: u8 = 5;
    pub const MODEL: u8 = 6;
}

fn classify(err: &anyhow::Error) -> u8 {
    use armforest::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return exit::CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } => exit::IO,
                E::MissingColumn(_)
                | E::NonFinite { .. }
                | E::Parse { .. }
                | E::ArmLabelGap { .. }
                | E::Empty(_)
                | E::ZeroPropensity { .. }
                | E::PropensitySum(_)
                | E::ArmAbsent { .. }
                | E::TooFewRows { .. } => exit::DATA,
                E::Csv(c) if c.is_io_error() => exit::IO,
                E::Csv(_) => exit::DATA,
                E::InvalidParameter(_) => exit::CONFIG,
                E::ModelVersion { .. } | E::DimensionMismatch { .. } | E::Json(_) => exit::MODEL,
                _ => exit::OTHER,
            };
        }
        if cause.is::<std::io::Error>() {
            return exit::IO;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            return if e.is_io_error() { exit::IO } else { exit::DATA };
        }
    }
    exit::OTHER
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { tracing::Level::INFO } else { tracing::Level::WARN };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();

    let result = (|| {
        if let Some(t) = cli.threads {
            if t == 0 {
                return Err(ConfigError("--threads must be at least 1".into()).into());
            }
            rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
        }
        match cli.command {
            Command::Simulate(a) => commands::simulate(a),
            Command::Fit(a) => commands::fit(a),
            Command::Assign(a) => commands::assign(a),
            Command::Evaluate(a) => commands::evaluate(a),
            Command::Tune(a) => commands::tune(a),
            Command::Oracle(a) => commands::oracle(a),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut parts: Vec<String> = Vec::new();
            for c in e.chain() {
                let m = c.to_string();
                if !parts.last().is_some_and(|p| p.ends_with(&m)) {
                    parts.push(m);
                }
            }
            let msg = parts.join(": ");
            eprintln!("armforest: error: {}", msg.replace('\n', " "));
            ExitCode::from(classify(&e))
        }
    }
}
