//! Command-line orchestration for influence-based instance transfer: persistence
//! formats, the pipeline commands, and the exact leave-one-out oracle.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod loo;
pub mod pipeline;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::PipelineConfig;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ibtl_core::Error),

    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn config(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// 0 success, 1 numerical or convergence failure, 2 I/O or configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 1,
            CliError::Core(
                ibtl_core::Error::AllDropped(_) | ibtl_core::Error::DropFractionExceeded { .. },
            ) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>, e: std::io::Error) -> CliError {
    let path = path.into();
    CliError::config(&path, e.to_string())
}
