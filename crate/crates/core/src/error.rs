//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or volume axis does not have the expected size.
    #[error("{op}: {axis} axis mismatch: expected {expected}, got {actual}")]
    DimMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An axis size must be divisible by `divisor` (pooling, network input).
    #[error("{op}: {axis} axis size {size} is not divisible by {divisor}{hint}")]
    NotDivisible {
        op: &'static str,
        axis: &'static str,
        size: usize,
        divisor: usize,
        hint: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// Structured parse failure with the byte offset of the offending field.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {0}")]
    Version(u32),

    /// Non-finite value detected where finite arithmetic is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Training aborted on a NaN loss; carries diagnostics for the report.
    #[error("numerical abort at iteration {iteration}: {diagnostics}")]
    NumericalAbort { iteration: u64, diagnostics: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
