use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not positive definite: nonpositive pivot {value:e} at index {pivot}; add damping")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("LiSSA recursion diverged at step {step} (norm grew {growth:e}x); increase the scale")]
    LissaDivergence { step: usize, growth: f64 },

    #[error("invalid label {label} for a model with {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("validation reference is empty: {0}")]
    EmptyReference(String),

    #[error(
        "explicit Hessian refused: {params} parameters exceeds the limit of {limit}; use the cg or lissa strategy"
    )]
    HessianTooLarge { params: usize, limit: usize },

    #[error("incompatible architecture at layer {layer}: {reason}")]
    IncompatibleArchitecture { layer: usize, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("data dropout would remove all {0} training samples")]
    AllDropped(usize),

    #[error(
        "data dropout would remove {dropped} of {total} samples, above the max drop fraction {max_fraction}"
    )]
    DropFractionExceeded {
        dropped: usize,
        total: usize,
        max_fraction: f64,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerics (as opposed to bad inputs or files).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::NumericalBreakdown(_)
                | Error::LissaDivergence { .. }
                | Error::Divergence { .. }
        )
    }
}
