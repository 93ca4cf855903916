//! Command-line surface of `geocond`: argument parsing, configuration
//! resolution, file formats and the command implementations.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod selftest;

use clap::Parser;

use crate::args::Cli;
use crate::commands::{execute, Context};
use crate::config::FileConfig;
use crate::error::{CliError, Result};

/// Default worker count; one thread keeps every command bit-reproducible.
pub const DEFAULT_THREADS: usize = 1;

/// Parses `argv`, configures threading and runs the command. Returns the
/// process exit code.
pub fn main_with(argv: &[String], out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => 1,
            };
        }
    };
    match run(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let threads = cli.threads.or(file.threads).unwrap_or(DEFAULT_THREADS);
    if threads == 0 {
        return Err(CliError::validation("threads: must be positive"));
    }
    configure_threads(threads);
    let ctx = Context {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        threads,
        file,
    };
    execute(&cli.command, &ctx, out, err)
}

fn configure_threads(n: usize) {
    // The tensor backend reads the same variable as the thread pool.
    std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    // Fails only when a pool already exists (repeated calls in one process).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}
