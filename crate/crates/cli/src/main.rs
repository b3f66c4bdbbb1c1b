//! `typedcsip` command-line front end.
//!
//! Exit status: 0 on success, 1 on a domain error, 2 when a locked
//! invariant is violated or a campaign aborts, 64 on a usage error.

mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::Cli;

const EXIT_DOMAIN: u8 = 1;
const EXIT_ABORTED: u8 = 2;
const EXIT_USAGE: u8 = 64;

/// Failure of one subcommand, already classified for the exit status.
#[derive(Debug)]
pub enum Failure {
    Domain(String),
    Aborted(String),
}

impl From<typedcsip::Error> for Failure {
    fn from(e: typedcsip::Error) -> Self {
        match e {
            typedcsip::Error::Aborted(_) => Failure::Aborted(e.to_string()),
            other => Failure::Domain(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DOMAIN)
        }
        Err(Failure::Aborted(m)) => {
            eprintln!("aborted: {m}");
            ExitCode::from(EXIT_ABORTED)
        }
    }
}
