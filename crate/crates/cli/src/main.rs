//! `dpar`: command-line driver for dpar-core.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dpar", version, about = "Bayesian multiple testing for panels of AR(1) time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replace pooled values by normal scores of their ranks.
    Standardize(Common),
    /// Single-(phi, v) mean-shift test by importance sampling.
    FitParametric(Common),
    /// Joint flat/GP trajectory model with DP residuals, by Gibbs sampling.
    FitNp(Common),
    /// Generate a panel and truth labels from a scenario file.
    Simulate(Common),
    /// Inclusion table, trajectory bands and discovery counts from a saved chain.
    Report(Common),
    /// Freeze the top trajectories of a saved chain and rerun for memberships.
    ClusterMle(ClusterArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Panel CSV (`unit_id,time,value`), or a chain JSON for `report`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Text file of `key=value` settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub burn: usize,
    #[arg(long, default_value_t = 2000)]
    pub keep: usize,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    /// Flag threshold; repeat for several. Defaults to 0.5 and 0.9.
    #[arg(long)]
    pub threshold: Vec<f64>,
    /// Scenario file for `simulate`.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub common: Common,
    /// Chain JSON written by `fit-np`.
    #[arg(long)]
    pub chain: PathBuf,
    /// Number of trajectories to freeze.
    #[arg(long, default_value_t = 17)]
    pub k: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Standardize(a) => commands::standardize(&a),
        Command::FitParametric(a) => commands::fit_parametric(&a),
        Command::FitNp(a) => commands::fit_np(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Report(a) => commands::report(&a),
        Command::ClusterMle(a) => commands::cluster_mle(&a),
    };
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dpar: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
