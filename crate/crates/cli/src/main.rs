//! `rfk`: command-line front end of the ReduceFormer attention kit.
//!
//! Exit codes: 0 success, 1 usage error, 2 numeric check failed, 3 I/O or
//! file-format error.

mod args;
mod commands;
mod io;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

/// A failed run and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Check(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Check(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Check(m) | Failure::Io(m) => m,
        }
    }
}

impl From<rfk_core::Error> for Failure {
    fn from(e: rfk_core::Error) -> Self {
        use rfk_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Io(_)
            | E::Csv(_)
            | E::Json(_)
            | E::BadMagic
            | E::VersionMismatch { .. }
            | E::Truncated(_)
            | E::Checksum { .. }
            | E::Malformed(_) => Failure::Io(msg),
            E::NonFinite { .. } | E::MissingAdjoint(_) => Failure::Check(msg),
            _ => Failure::Usage(msg),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
