//! `otk` — batch experiment runner for the optimal-control toolkit.
//!
//! Verbs:
//!   run <config>       execute the experiment described by a TOML config
//!   validate <config>  parse and validate without running
//!   list               print the environment/optimizer/integrator catalog
//!
//! Exit codes: 0 converged/completed, 2 budget exhausted without
//! convergence, 1 validation or runtime error.

mod config;
mod experiments;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Config;

#[derive(Parser)]
#[command(name = "otk", version, about = "continuous-time optimal control toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
        /// Random seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Suppress progress output.
        #[arg(long)]
        quiet: bool,
    },
    /// Parse and validate a config file without running it.
    Validate { config: PathBuf },
    /// List environments, trajectory optimizers, solvers, and integrators.
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            print!("{}", experiments::list_catalog());
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match Config::load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
        Command::Run {
            config,
            output_dir,
            overwrite,
            seed,
            quiet,
        } => {
            let (cfg, echo) = match Config::load(&config) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(1);
                }
            };
            let out_dir = output_dir
                .or_else(|| cfg.experiment.output_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| {
                    PathBuf::from(format!("runs/{}", cfg.experiment.kind.name()))
                });
            match experiments::run(&cfg, &config, &echo, &out_dir, overwrite, seed, quiet) {
                Ok(status) => ExitCode::from(status.code() as u8),
                Err(e) => {
                    eprintln!("error [{}]: {e:#}", config.display());
                    ExitCode::from(1)
                }
            }
        }
    }
}
