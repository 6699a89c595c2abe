use std::io;
use std::path::{Path, PathBuf};

use hopcast_core::TraceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Parse { .. } => 3,
            CliError::Estimation(_) => 4,
            CliError::Io { .. } => 5,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn trace(path: &Path, err: TraceError) -> Self {
        match err {
            TraceError::Io(source) => CliError::io(path, source),
            other => CliError::Parse {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
