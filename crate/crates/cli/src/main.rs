use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distdesign_cli::run::{execute, CommandKind, Failure, Invocation};

/// Batch experiment driver: optimizes training distributions and evaluates
/// them against reference distributions on held-out deployment ensembles.
#[derive(Parser)]
#[command(name = "distdesign", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment description (sectioned key = value text).
    #[arg(long)]
    config: PathBuf,
    /// Override the base seed; replicate r runs with seed + r.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for replicates (0 = one per core).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Gradient descent on Gaussian training-distribution parameters.
    Bilevel(Common),
    /// Alternating upper-bound minimization, Gaussian candidate.
    AmaGaussian(Common),
    /// Alternating upper-bound minimization, particle-cloud candidate.
    AmaParticles(Common),
    /// Reference training distributions only.
    Baselines(Common),
    /// Evaluate a fixed or freshly trained model per distribution.
    Eval(Common),
    /// Err as a function of the training-sample budget.
    Sweep(Common),
}

impl Command {
    fn split(self) -> (CommandKind, Common) {
        match self {
            Command::Bilevel(c) => (CommandKind::Bilevel, c),
            Command::AmaGaussian(c) => (CommandKind::AmaGaussian, c),
            Command::AmaParticles(c) => (CommandKind::AmaParticles, c),
            Command::Baselines(c) => (CommandKind::Baselines, c),
            Command::Eval(c) => (CommandKind::Eval, c),
            Command::Sweep(c) => (CommandKind::Sweep, c),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = cli.command.split();
    let invocation = Invocation {
        config_path: common.config,
        seed: common.seed,
        replicates: common.replicates,
        out: common.out,
        threads: common.threads,
    };
    match execute(kind, &invocation) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Config(m) => eprintln!("config error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
