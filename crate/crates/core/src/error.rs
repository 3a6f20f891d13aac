//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix shapes incompatible for the requested operation.
    #[error(
        "dimension mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}"
    )]
    DimensionMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// An operation was called outside its contract (non-scalar backward root,
    /// non-distribution input, contradictory flags, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad user-supplied parameter (k out of range, negative weight, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Input data failed validation (negative expression, duplicate genes, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A file could not be parsed.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A loss or parameter became non-finite during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
