use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use merge_cli::{cmd_run, cmd_sweep, load_config, summary, CliError, SweepSpec};

#[derive(Parser)]
#[command(name = "mergesim", version, about = "Mixed-traffic on-ramp merging simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trajectories.csv, metrics.json, events.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a penetration × volume grid and write sweep.csv and aggregate.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        penetrations: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        volumes: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        replications: usize,
        /// Worker threads; defaults to the machine's parallelism.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a configuration without running it.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let m = cmd_run(cfg, &out)?;
            println!("{}", summary(&m));
            println!("results in {}", out.display());
        }
        Command::Sweep {
            config,
            penetrations,
            volumes,
            replications,
            jobs,
            out,
        } => {
            let spec = SweepSpec {
                penetrations,
                volumes,
                replications,
                base: load_config(&config)?,
                out,
            };
            let rows = cmd_sweep(&spec, jobs)?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!("{} runs ({failed} failed), results in {}", rows.len(), spec.out.display());
        }
        Command::Check { config } => {
            load_config(&config)?;
            println!("{}: ok", config.display());
        }
    }
    Ok(())
}
