#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod pipeline;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pipeline::{image, invert_command, load_config, rom, simulate, CliError};

#[derive(Parser)]
#[command(name = "emrom", version, about = "Reduced order model imaging and inversion for 2D electromagnetic waves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the data series for the configured phantom.
    Simulate {
        #[arg(short, long)]
        config: PathBuf,
        /// Go through the measured array response and keep it (needed for RTM).
        #[arg(long)]
        response: bool,
    },
    /// Build the ROM from stored data and write the interpolation report.
    Rom {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Image with the ROM (and RTM when configured).
    Image {
        #[arg(short, long)]
        config: PathBuf,
        /// Coefficient file from `invert` giving the reference medium.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Estimate the wave speed from stored data.
    Invert {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run the invariant suite and print a pass/fail table.
    Verify,
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Simulate { config, response } => {
            for path in simulate(&load_config(&config)?, response)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Rom { config } => {
            let rom = rom(&load_config(&config)?)?;
            println!("ROM order {} of {} (block size {})", rom.order(), rom.n, rom.block_size());
        }
        Command::Image { config, reference } => {
            for img in image(&load_config(&config)?, reference.as_deref())? {
                println!("image {}", img.file_stem());
            }
        }
        Command::Invert { config } => {
            let a = invert_command(&load_config(&config)?)?;
            println!(
                "objective {:.6e} -> {:.6e}{}",
                a.initial_objective,
                a.final_objective,
                if a.converged { "" } else { " (not converged)" }
            );
        }
        Command::Verify => {
            let checks = verify::run_suite();
            print!("{}", verify::table(&checks));
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
