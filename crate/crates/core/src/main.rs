use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spinesim::cli::{self, Command, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "spinesim", version, about = "Branching-population and spine-process Monte Carlo")]
struct Args {
    #[command(subcommand)]
    command: Cmd,

    /// JSON configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override run.seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override run.replicates
    #[arg(long, global = true)]
    replicates: Option<usize>,

    /// Output CSV path (overrides output.path)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (0 = machine parallelism)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override run.caps.max_individuals
    #[arg(long = "cap-individuals", global = true)]
    cap_individuals: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate full population trees and export the genealogy CSV
    Simulate,
    /// Simulate the time-inhomogeneous auxiliary (spine) process
    Auxiliary,
    /// Simulate the tagged-cell comparison process
    Tagged,
    /// Simulate trees and export uniformly sampled lineages
    Sample,
    /// Statistically verify an identity: many_to_one | whole_tree | forks |
    /// feynman_kac | sampling
    Verify { identity: String },
    /// Emit the three division-count series (uniform sample, auxiliary,
    /// tagged) with companion KS results
    Figure,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(path) => {
            println!("wrote {}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}

fn run(args: Args) -> spinesim::Result<PathBuf> {
    let config_path = args.config.ok_or_else(|| {
        spinesim::Error::ConfigParse("--config PATH is required".into())
    })?;
    let mut cfg = RunConfig::from_file(&config_path)?;
    cfg.apply(&Overrides {
        seed: args.seed,
        replicates: args.replicates,
        out: args.out,
        threads: args.threads,
        cap_individuals: args.cap_individuals,
    });
    let (command, identity) = match &args.command {
        Cmd::Simulate => (Command::Simulate, None),
        Cmd::Auxiliary => (Command::Auxiliary, None),
        Cmd::Tagged => (Command::Tagged, None),
        Cmd::Sample => (Command::Sample, None),
        Cmd::Verify { identity } => (Command::Verify, Some(identity.as_str())),
        Cmd::Figure => (Command::Figure, None),
    };
    cli::run(command, identity, &cfg)
}
