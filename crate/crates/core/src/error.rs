use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("input length {len} is shorter than kernel size {kernel}")]
    WindowTooShort { len: usize, kernel: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite activation after {0}")]
    NonFiniteActivation(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("leakage guard: {0}")]
    Leakage(String),

    #[error("ROC AUC is undefined: {0}")]
    UndefinedMetric(String),

    #[error("training data contains a single class: {0}")]
    SingleClass(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("planted signal mismatch: {0}")]
    SignalMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse grouping used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Io,
    Validation,
    Numeric,
    Leakage,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io(_) => ErrorCategory::Io,
            Error::NonFiniteGradient(_)
            | Error::NonFiniteActivation(_)
            | Error::NonFiniteLoss { .. }
            | Error::SignalMismatch(_) => ErrorCategory::Numeric,
            Error::Leakage(_) => ErrorCategory::Leakage,
            _ => ErrorCategory::Validation,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
