//! Shared error type for the whole engine.

use std::fmt;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor or parameter extents do not line up; names both offending shapes.
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Input violates a documented precondition (empty dataset, short waveform, ...).
    InvalidInput(String),
    /// A computation produced or consumed a non-finite value.
    Numerical(String),
    /// Training loss became NaN; reports the epoch where it happened.
    Divergence { epoch: usize },
    /// Class labels are malformed (not one-hot, single-class training set, ...).
    Label(String),
    /// API misuse, e.g. audio passed to a face-only model.
    Usage(String),
    /// Dataset construction constraint violated (subject with too few utterances, ...).
    Data(String),
    /// A file is syntactically valid but uses an unsupported encoding; names the field.
    UnsupportedFormat(String),
    /// A file is malformed or truncated.
    Parse(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                left,
                right,
            } => write!(f, "shape mismatch in {context}: {left:?} vs {right:?}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Error::Divergence { epoch } => write!(f, "training diverged (NaN loss) at epoch {epoch}"),
            Error::Label(msg) => write!(f, "label error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::UnsupportedFormat(msg) => write!(f, "unsupported format: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
