use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use weakboost_cli::{cmd_converge, cmd_pde, cmd_variance, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "weakboost", version, about = "Weak-order experiments for CIR and Heston schemes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimates per grid size and the regressed weak order.
    Converge(Args),
    /// Variance of the correction term per grid size and coupling.
    Variance(Args),
    /// Hybrid tree / finite-difference put price.
    Pde(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<u64>,
    /// Target 95% half-width per point; replaces the sample count.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Record wall-clock seconds in the CSV files.
    #[arg(long)]
    timings: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (run, args): (fn(&ExperimentConfig, &Overrides) -> anyhow::Result<_>, Args) = match cli.cmd {
        Cmd::Converge(a) => (cmd_converge, a),
        Cmd::Variance(a) => (cmd_variance, a),
        Cmd::Pde(a) => (cmd_pde, a),
    };
    let ov = Overrides { seed: args.seed, samples: args.samples, epsilon: args.epsilon, out: args.out, timings: args.timings };
    match ExperimentConfig::load(&args.config).and_then(|cfg| run(&cfg, &ov)) {
        Ok(summary) => {
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
