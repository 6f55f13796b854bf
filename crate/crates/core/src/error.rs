use std::fmt;
use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the toolkit.
#[derive(Debug)]
pub enum Error {
    /// A tensor or layer received data whose shape does not match its contract.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// A graph node refers to an unknown input or violates graph structure.
    InvalidGraph(String),
    /// A layer kind or configuration the engine does not support.
    Unsupported(String),
    /// An argument outside its documented domain.
    InvalidArgument(String),
    /// Training produced a non-finite loss; carries the first offending node.
    DivergedLoss { epoch: usize, node: String },
    /// A model file, config file, or CSV failed to parse.
    Parse { path: String, message: String },
    /// Model file pair declares tensors inconsistent with the weight blob.
    BlobMismatch { tensor: String, message: String },
    /// Serialized model format version this build does not understand.
    VersionMismatch { found: String },
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(f, "shape mismatch in {context}: expected {expected}, got {got}"),
            Error::InvalidGraph(msg) => write!(f, "invalid model graph: {msg}"),
            Error::Unsupported(msg) => write!(f, "unsupported operation: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::DivergedLoss { epoch, node } => {
                write!(f, "non-finite loss at epoch {epoch}, first offending node {node}")
            }
            Error::Parse { path, message } => write!(f, "parse error in {path}: {message}"),
            Error::BlobMismatch { tensor, message } => {
                write!(f, "weight blob mismatch for tensor {tensor}: {message}")
            }
            Error::VersionMismatch { found } => {
                write!(f, "unsupported model format version {found}")
            }
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
