//! `mfeq`: solve, simulate and verify time-inconsistent mean-field
//! equilibria from JSON model files.
//!
//! Exit codes: 0 success, 1 a verification gate failed, 2 bad input,
//! 3 numerical failure. Failures also leave `error.json` in the output
//! directory.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mfeq", version, about = "Equilibria of time-inconsistent mean-field control problems")]
struct Cli {
    /// Cap on worker threads; defaults to the available cores. Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the Riccati system and export the solution.
    Solve(SolveArgs),
    /// Simulate the particle system under the equilibrium strategy.
    Simulate(SimulateArgs),
    /// Check the equilibrium property analytically and by simulation.
    Verify(VerifyArgs),
    /// Run a reference example against its closed form.
    Example(ExampleArgs),
    /// Tabulate equation residuals of a solved model.
    Residuals(SolveArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Partition,
    FixedPoint,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExampleName {
    MeanVariance,
    SystemicRisk,
    Nonlq,
}

#[derive(Args, Debug, Clone)]
pub struct SolveArgs {
    /// Model file, or an example parameter file with a `kind` key.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Partition)]
    pub method: Method,
    /// Grid cells on [0, T].
    #[arg(long, default_value_t = 200)]
    pub grid: usize,
    /// RK4 substeps per cell.
    #[arg(long, default_value_t = 4)]
    pub substeps: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SimArgs {
    #[arg(long, default_value_t = 2000)]
    pub particles: usize,
    /// Common-noise paths.
    #[arg(long, default_value_t = 128)]
    pub paths: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    /// Seed for all randomness of the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Initial law as JSON, e.g. `{"kind":"gaussian","mean":[1],"cov":[[0.25]]}`.
    #[arg(long)]
    pub init: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub solve: SolveArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    /// Start time of the simulation.
    #[arg(long, default_value_t = 0.0)]
    pub t0: f64,
    /// Particles per path written to paths.csv (0 disables the file).
    #[arg(long, default_value_t = 0)]
    pub keep_particles: usize,
    /// Keep every n-th step in paths.csv.
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
}

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub solve: SolveArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    /// Time of the spike probes.
    #[arg(long, default_value_t = 0.2)]
    pub t: f64,
    /// Perturbation offsets from the equilibrium map: `dA,dc` for LQ models,
    /// a single number for the multiplicative model. Repeatable.
    #[arg(long = "offset", allow_hyphen_values = true)]
    pub offsets: Vec<String>,
    /// Probe only the equilibrium map itself.
    #[arg(long, conflicts_with = "offsets")]
    pub only_equilibrium: bool,
    /// Spike window lengths, strictly decreasing; defaults to {0.2,0.1,0.05,0.025}(T-t).
    #[arg(long, value_delimiter = ',')]
    pub eps: Vec<f64>,
    /// Random affine maps per certificate probe.
    #[arg(long, default_value_t = 1000)]
    pub perturbations: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ExampleArgs {
    #[arg(value_enum)]
    pub name: ExampleName,
    /// Parameter file; the built-in demo parameters otherwise.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Grid cells; 200, or 400 for systemic-risk.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, value_enum, default_value_t = Method::Partition)]
    pub method: Method,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let out = match &cli.command {
        Command::Solve(a) | Command::Residuals(a) => a.out.clone(),
        Command::Simulate(a) => a.solve.out.clone(),
        Command::Verify(a) => a.solve.out.clone(),
        Command::Example(a) => a.out.clone(),
    };
    let result = commands::set_threads(cli.threads).and_then(|_| match &cli.command {
        Command::Solve(a) => commands::solve(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Verify(a) => commands::verify(a),
        Command::Example(a) => commands::example(a),
        Command::Residuals(a) => commands::residuals(a),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification gate failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.write(&out);
            ExitCode::from(e.code())
        }
    }
}
