use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use corsa::benchmark::SweepAxis;
use corsa_cli::{export, grid, load_config, run, sweep, CliError, ErrorRecord};

#[derive(Parser)]
#[command(name = "corsa", version, about = "Knowledge-update experiments on a synthetic fact benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Dotted override, e.g. `optimizer.use_sam=false`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the full method and its ablations (no-sam, no-dpo, no-pcgrad).
    Grid {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sweep one axis (fraction, lambda, rho) over comma-separated values.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write plot-ready CSVs from a completed run directory.
    Export { run_dir: PathBuf },
}

fn dispatch(cmd: Command) -> Result<Vec<PathBuf>, CliError> {
    match cmd {
        Command::Run { config, overrides } => Ok(vec![run(&load_config(&config, &overrides)?)?]),
        Command::Grid { config, overrides } => Ok(vec![grid(&load_config(&config, &overrides)?)?]),
        Command::Sweep { config, axis, values, overrides } => Ok(vec![sweep(&load_config(&config, &overrides)?, axis, &values)?]),
        Command::Export { run_dir } => export(&run_dir),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let rec = ErrorRecord::new(&e, None);
            eprintln!("{}", serde_json::to_string(&rec).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
