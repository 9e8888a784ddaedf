//! Error type shared by every module of the crate.

use std::io;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not agree for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A layer or operation was configured with parameters that cannot work.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Data handed to an operation is outside its domain (labels, pixels, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// The API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// A hidden feature showed no deviation, so the criticality ratio is undefined.
    #[error("degenerate feature at layer {layer}: previous-layer weakness {weakness:e} is below the division guard")]
    DegenerateFeature { layer: usize, weakness: f64 },

    /// Bytes on disk do not follow the expected file layout.
    #[error("format error: {0}")]
    Format(String),

    /// File layout is recognized but the contents are damaged or truncated.
    #[error("corrupted data: {0}")]
    Corruption(String),

    /// Two inputs that must agree with each other do not.
    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    /// A checkpoint does not fit the architecture it is loaded into.
    #[error("incompatible architecture: {0}")]
    Compatibility(String),

    /// Malformed CSV or text record.
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short category tag, used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Usage(_) => "usage",
            Error::DegenerateFeature { .. } => "degenerate-feature",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::Consistency(_) => "consistency",
            Error::Compatibility(_) => "compatibility",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }

    /// I/O error annotated with the path involved.
    pub fn io_at(path: &std::path::Path, e: io::Error) -> Self {
        Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
