//! `rhawk`: simulate, corrupt, train, and evaluate noise-robust deep Hawkes
//! process experiments, with a manifest recording every stage for replay.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or input error.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if commands::is_input_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
