//! `hdflim` command-line driver.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 I/O error.

mod args;
mod commands;
mod config;
mod error;
mod manifest;
mod provider;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use config::FileConfig;
use error::CliError;

fn run(cli: &Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Learn(a) => commands::learn::run(a, &file),
        Command::Binarize(a) => commands::memory::binarize(a),
        Command::Infer(a) => commands::infer::run(a, &file),
        Command::Bench(a) => commands::bench::run(a, &file),
        Command::Selftest(a) => commands::misc::selftest(a),
        Command::Inspect(a) => commands::memory::inspect(a),
        Command::Merge(a) => commands::memory::merge(a),
        Command::Synth(a) => commands::misc::synth(a),
        Command::ServeStub(a) => commands::misc::serve_stub(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .parse_env("HDFLIM_LOG")
        .format_timestamp_millis()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hdflim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
