//! Command-line driver for the distress-portfolio solver.
//!
//! Four verbs: `solve` writes the value surfaces, `sweep` writes strategy
//! tables across a parameter list, `verify` runs the Monte Carlo checks
//! against the solved value, and `filter-demo` writes one simulated
//! truth/filter path pair. Exit codes separate the failure classes: 1 for
//! configuration errors, 2 for numerical or I/O failures, 3 for a run whose
//! verification flags came back false.

mod commands;
mod config;

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

/// A command outcome that must map onto a specific process exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(String),
    Verification(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<distress_portfolio::Error> for Failure {
    fn from(e: distress_portfolio::Error) -> Self {
        use distress_portfolio::Error as E;
        match e {
            E::InvalidConfig(_)
            | E::IndexOutOfRange(_)
            | E::LengthMismatch { .. }
            | E::UnsupportedDimension(_)
            | E::InhomogeneousGroup { .. } => Failure::Config(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "distress-portfolio",
    version,
    about = "Portfolio optimization under hidden-regime contagious distress"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides the configuration's `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Simulation seed; overrides the configuration's `simulation.seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for the Monte Carlo batches; 0 uses all cores.
    #[arg(long, value_name = "N", default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the coupled system; write one surface CSV per distress state.
    Solve(CommonArgs),
    /// Re-solve across the configured parameter values; write strategy
    /// tables at t = 0 and a monotonicity summary.
    Sweep(CommonArgs),
    /// Solve, then check the value against both Monte Carlo estimators and
    /// audit the strategy against perturbed competitors.
    Verify(CommonArgs),
    /// Simulate one truth/filter path pair and write it as a CSV.
    FilterDemo(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}

fn run(command: &Command) -> Result<(), Failure> {
    let args = match command {
        Command::Solve(a) | Command::Sweep(a) | Command::Verify(a) | Command::FilterDemo(a) => a,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build_global()
        .map_err(|e| Failure::Numerical(format!("thread pool: {e}")))?;

    let text = fs::read_to_string(&args.config).map_err(|e| {
        Failure::Config(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let mut exp: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        exp.simulation.seed = seed;
    }

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&exp.output_dir));
    fs::create_dir_all(&out)
        .map_err(|e| Failure::Numerical(format!("cannot create {}: {e}", out.display())))?;

    match command {
        Command::Solve(_) => commands::cmd_solve(&exp, &out),
        Command::Sweep(_) => commands::cmd_sweep(&exp, &out),
        Command::Verify(_) => commands::cmd_verify(&exp, &out),
        Command::FilterDemo(_) => commands::cmd_filter_demo(&exp, &out),
    }
}
