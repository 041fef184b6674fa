// SPDX-License-Identifier: MIT OR Apache-2.0

//! `snmf`: factorize activation dumps, inspect features, build hierarchies
//! and calibrate steering interventions.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a data error.

mod args;
mod commands;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use args::Cli;

/// Why a run stopped.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or flag combinations.
    Usage(String),
    /// Unreadable, inconsistent or numerically unusable inputs.
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<snmf_core::SnmfError> for Failure {
    fn from(e: snmf_core::SnmfError) -> Self {
        match e {
            snmf_core::SnmfError::InvalidConfig(msg) => Failure::Usage(msg),
            other => Failure::Data(other.into()),
        }
    }
}

/// Progress verbosity from `SNMF_LOG`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verbosity {
    Quiet,
    Info,
    Debug,
}

fn verbosity() -> Result<Verbosity, String> {
    match std::env::var("SNMF_LOG") {
        Err(std::env::VarError::NotPresent) => Ok(Verbosity::Info),
        Ok(v) => match v.as_str() {
            "quiet" => Ok(Verbosity::Quiet),
            "info" | "" => Ok(Verbosity::Info),
            "debug" => Ok(Verbosity::Debug),
            other => Err(format!("SNMF_LOG must be quiet, info or debug, got {other:?}")),
        },
        Err(e) => Err(format!("SNMF_LOG: {e}")),
    }
}

fn init_logging(v: Verbosity) {
    let level = match v {
        Verbosity::Quiet => log::LevelFilter::Error,
        Verbosity::Info => log::LevelFilter::Info,
        Verbosity::Debug => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, rec| writeln!(buf, "{}: {}", rec.level().as_str().to_lowercase(), rec.args()))
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let v = match verbosity() {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    init_logging(v);
    match commands::run(cli, v) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
