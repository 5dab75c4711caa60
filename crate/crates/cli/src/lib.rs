//! Command-line harness: synthetic data generation, multi-seed training,
//! grid sweeps, PCA plots and the gradient check.

pub mod args;
pub mod commands;
pub mod harness;
pub mod output;
pub mod plot;

use std::ffi::OsString;

use clap::Parser;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FAILURE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mist_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    /// Gradient check above threshold.
    #[error("{0}")]
    Threshold(String),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use mist_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Threshold(_) => EXIT_FAILURE,
            CliError::Io { .. } | CliError::Csv(_) | CliError::Json(_) => EXIT_IO,
            CliError::Core(e) => match e {
                E::Divergence { .. } | E::NonFinite { .. } => EXIT_FAILURE,
                E::Io(_) | E::Json(_) | E::Format { .. } | E::Input(_) => EXIT_IO,
                E::Config(_) | E::Parameter(_) | E::Generation(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` and runs the command, returning the process exit code.
/// Flags are fully validated before anything touches the filesystem.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
