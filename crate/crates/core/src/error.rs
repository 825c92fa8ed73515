//! Error types shared across the library.

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates an invariant or two values conflict.
    #[error("configuration error: {0}")]
    Config(String),

    /// Vector/matrix dimensions do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The message-passing iteration produced a non-finite value.
    /// The per-iteration trace up to the failure is attached.
    #[error("iteration diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Vec<crate::gamp::TraceRecord>,
    },

    /// Column thresholding found nothing to keep (all-zero estimate).
    #[error("empty selection: {0}")]
    EmptySelection(String),

    /// The steering matrix for the estimated angles is numerically rank
    /// deficient (near-duplicate angles).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A per-column estimation step failed; the column index is attached.
    #[error("column {column}: {source}")]
    Column {
        column: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A spec file or override could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
