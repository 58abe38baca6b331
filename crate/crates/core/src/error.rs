//! Error type shared across the crate.

use thiserror::Error;

/// Convenience alias used by every fallible operation in this crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A mathematical precondition was violated: an argument lies outside the
    /// domain on which the operation is defined (negative distance, age
    /// outside the basis span, nonpositive time lag, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Structurally invalid input: dimension mismatch, empty series, bad
    /// range, inconsistent shapes.
    #[error("input error: {0}")]
    Input(String),

    /// A text table could not be parsed. `line` is 1-based and refers to the
    /// original file, including headers.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Linear algebra broke down (non-positive-definite innovation
    /// covariance, failed Cholesky factorisation, non-finite intermediate).
    /// `step` is the 0-based time index at which the failure occurred.
    #[error("numerical error at step {step}: {message}")]
    Numerical { step: usize, message: String },

    /// Hyperparameter estimation could not produce a usable optimum.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Underlying I/O failure while reading or writing files.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// CSV-level failure in the interchange reader/writer.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Shorthand for a numerical failure at a given time step.
    pub(crate) fn numerical(step: usize, message: impl Into<String>) -> Self {
        Error::Numerical {
            step,
            message: message.into(),
        }
    }
}
