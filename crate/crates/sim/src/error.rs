use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical abort at tick {tick}: {source}")]
    Numerical {
        tick: u64,
        #[source]
        source: fic_core::Error,
    },
    #[error("trace error: {0}")]
    Trace(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl SimError {
    pub fn config(msg: impl Into<String>) -> Self {
        SimError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) => 2,
            SimError::Numerical { .. } => 3,
            _ => 1,
        }
    }
}

pub type SimResult<T> = std::result::Result<T, SimError>;
