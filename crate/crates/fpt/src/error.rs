use std::path::PathBuf;

use thiserror::Error;

/// Failures of the command-line pipeline, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Write { .. } => 2,
            CliError::Data(_) | CliError::Read { .. } => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<fpt_core::Error> for CliError {
    fn from(e: fpt_core::Error) -> Self {
        let msg = e.to_string();
        if e.is_data_error() {
            CliError::Data(msg)
        } else if e.is_numerical() {
            CliError::Numerical(msg)
        } else {
            CliError::Config(msg)
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
