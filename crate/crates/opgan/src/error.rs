//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants carry enough
//! context (file, line, byte offset, shapes) to diagnose a failure without a
//! debugger.

use std::fmt;
use std::path::PathBuf;

/// Errors produced by tensor ops, model construction, I/O and training.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    Shape(String),
    /// Invalid model or training configuration.
    Config(String),
    /// A segment whose samples are all equal cannot be min-max normalized.
    DegenerateSegment { context: String },
    /// A numeric line in a waveform file failed to parse.
    Parse { file: PathBuf, line: usize, message: String },
    /// Underlying filesystem failure, with the path involved.
    Io { path: PathBuf, source: std::io::Error },
    /// A model or checkpoint file is malformed; `offset` is the byte position
    /// at which decoding failed.
    Decode { offset: u64, message: String },
    /// Training produced a non-finite loss and was aborted.
    NonFinite { iteration: usize, detail: String },
    /// An API was called in a way its contract forbids.
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::DegenerateSegment { context } => {
                write!(f, "degenerate segment (all samples equal): {context}")
            }
            Error::Parse { file, line, message } => {
                write!(f, "parse error in {} line {line}: {message}", file.display())
            }
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Decode { offset, message } => {
                write!(f, "decode error at byte {offset}: {message}")
            }
            Error::NonFinite { iteration, detail } => {
                write!(f, "non-finite loss at iteration {iteration}: {detail}")
            }
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    /// Attach a path to a raw `io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
