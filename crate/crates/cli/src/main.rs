//! `aeblow`: batch front-end for the numerical laboratory.
//!
//! Exit status 0 on success, 1 when a run violates an invariant or a check
//! fails, 2 when the configuration is unusable.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Invariant(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// Errors raised while turning the configuration into library objects.
    pub fn from_setup(e: aeblow_core::Error) -> Self {
        CliError::Config(e.to_string())
    }

    /// Errors raised by a run itself.
    pub fn from_run(e: aeblow_core::Error) -> Self {
        CliError::Invariant(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Invariant(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "aeblow", version, about = "Blow-up experiments for semilinear waves on asymptotically Euclidean metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output file; replaces the path in the configuration. Standard output when neither is set.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the long-range conditions of a metric profile; writes a JSON report.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate generalized eigenfunctions as CSV.
    Eigen {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        #[arg(long)]
        rmax: Option<f64>,
    },
    /// ODE studies.
    Ode {
        #[command(subcommand)]
        study: OdeStudy,
    },
    /// Evolve one solution and write its functionals as CSV.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        dr: Option<f64>,
        #[arg(long)]
        tmax: Option<f64>,
    },
    /// Blow-up times over an amplitude grid and the fitted lifespan exponent.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps_start: Option<f64>,
        #[arg(long)]
        eps_count: Option<usize>,
    },
    /// Critical-power ingredients: comparison-function bounds, the integral
    /// inequality along a run, and the slicing iteration; writes a JSON report.
    Critical {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum OdeStudy {
    /// Blow-up times of F″ = k(t+1)^{−α}F^β over a δ grid, with the fitted slope.
    Kato {
        #[command(flatten)]
        common: Common,
    },
    /// Forward and backward comparison solutions of y″ = λ²m̃²y.
    Comparison {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { common } => commands::validate(&common),
        Command::Eigen { common, lambda, rmax } => commands::eigen(&common, lambda, rmax),
        Command::Ode { study } => commands::ode(&study),
        Command::Solve {
            common,
            eps,
            p,
            dr,
            tmax,
        } => commands::solve(&common, commands::SolveOverrides { eps, p, dr, tmax }),
        Command::Sweep {
            common,
            eps_start,
            eps_count,
        } => commands::sweep(&common, eps_start, eps_count),
        Command::Critical { common, eps } => commands::critical(&common, eps),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aeblow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
