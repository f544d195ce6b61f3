//! Batch driver: JSON-configured ladder runs, verification suites, stability
//! studies and run reports.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod output;

pub use config::RunConfig;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    /// Inadmissible parameters, failed verification or an incomplete run report.
    pub const FAILED: u8 = 1;
    /// Bad configuration or an unknown suite name.
    pub const CONFIG: u8 = 2;
    /// A solve failed; a partial manifest is written when possible.
    pub const SOLVER: u8 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown suite '{name}' (known: {known}, all)")]
    UnknownSuite { name: String, known: String },

    #[error(transparent)]
    Core(#[from] nnflow::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::UnknownSuite { .. } => exit::CONFIG,
            CliError::Core(_) | CliError::Io { .. } => exit::SOLVER,
        }
    }

    /// Reclassifies library errors raised while checking inputs.
    pub fn into_config(self) -> Self {
        match self {
            CliError::Core(e) => CliError::Config(e.to_string()),
            other => other,
        }
    }
}
