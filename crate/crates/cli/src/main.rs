mod args;
mod commands;
mod manifest;
mod plot;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    /// A library error caused by the flags rather than the data.
    pub fn usage_from(e: trackpulse::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<trackpulse::Error> for CliError {
    fn from(e: trackpulse::Error) -> Self {
        use trackpulse::Error as E;
        let code = match &e {
            E::Io { .. } | E::Format { .. } => EXIT_IO,
            E::NonFiniteLoss { .. } | E::Simulation { .. } | E::Division(_) | E::Evaluation(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

/// Worker count from `TRACKPULSE_THREADS`; 1 when unset.
fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("TRACKPULSE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::usage(format!("TRACKPULSE_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = threads_from_env()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Generate(a) => commands::generate(a, threads),
        Command::Train(a) => commands::train(a, threads),
        Command::Eval(a) => commands::eval(a, threads),
        Command::Predict(a) => commands::predict(a, threads),
        Command::Plot(a) => commands::plot(a, threads),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
