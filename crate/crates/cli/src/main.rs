//! `kamtor`: solve, reduce, measure and stability runs from a TOML config.
//!
//! Exit status: 0 on success, 2 when the frequency is excluded by a
//! diophantine or Melnikov condition (omega not in the admissible set),
//! 1 on any other error.

mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "kamtor", version, about = "Quasi-periodic invariant tori for a perturbed NLS normal form")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Nash-Moser iteration for the torus at the configured frequency.
    Solve(Common),
    /// Linearization and KAM reduction at the trivial torus.
    Reduce(Common),
    /// Monte-Carlo estimate of the excluded frequency fraction.
    Measure(Common),
    /// Solve, then integrate the linearized flow at the torus.
    Stability(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the JSON report and CSV series.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Tangential frequency, comma separated; overrides the config.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub omega: Option<Vec<f64>>,
    /// Log-spaced sweep `gamma=lo:hi:n` or `eps=lo:hi:n`; overrides the config.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Seed for every sampler; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "KAMTOR_THREADS", default_value_t = 0)]
    pub threads: usize,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Solve(c) => (run::Subcommand::Solve, c),
        Command::Reduce(c) => (run::Subcommand::Reduce, c),
        Command::Measure(c) => (run::Subcommand::Measure, c),
        Command::Stability(c) => (run::Subcommand::Stability, c),
    };
    if common.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run::run_pipeline(name, common) {
        Ok(run::Status::Done) => ExitCode::SUCCESS,
        Ok(run::Status::Excluded(msg)) => {
            eprintln!("omega not in the admissible set: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
