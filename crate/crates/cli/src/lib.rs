//! Command-line front end: `massweights <subcommand>`.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage, 3 bad input,
//! 4 numeric fault. Every file output is written to a temporary file and
//! renamed into place.

mod args;
mod commands;
pub mod error;
pub mod ledger;
pub mod plot;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::{Cli, Command};
pub use commands::{resolve_checkpoint, CHECKPOINT_DIR_ENV};
pub use error::{exit, CliError, CliResult};

/// Runs one command line (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => exit::OK,
                _ => exit::USAGE,
            };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: &Command) -> CliResult<()> {
    match command {
        Command::Init(a) => commands::init(a),
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain_cmd(a),
        Command::Trace(a) => commands::trace(a),
        Command::Detect(a) => commands::detect(a),
        Command::Attack(a) => commands::attack(a),
        Command::Eval(a) => commands::eval(a),
        Command::Train(a) => commands::train(a),
        Command::Plot(a) => commands::plot(a),
    }
}
