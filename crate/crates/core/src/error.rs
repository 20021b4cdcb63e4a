//! Crate-wide error type.

use std::fmt;

/// Errors produced by tensors, the tape, models, training, and I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor or graph node received operands with incompatible shapes.
    Shape {
        context: String,
        detail: String,
    },
    /// A value left the finite range (NaN or infinity) where finiteness is required.
    NonFinite {
        context: String,
    },
    /// An argument fell outside its documented domain.
    Domain {
        context: String,
        detail: String,
    },
    /// An API contract was violated (empty dataset, non-scalar backward root, ...).
    Contract {
        context: String,
        detail: String,
    },
    /// Training aborted; carries the stage label and a diagnostic dump.
    TrainingAbort {
        stage: String,
        detail: String,
    },
    /// File parsing failed; `line` is 1-based, 0 when not line-specific.
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    /// Persisted-file integrity problem (truncation, corrupt section length).
    Integrity {
        detail: String,
    },
    /// Checkpoint format version not supported by this build.
    VersionMismatch {
        found: u32,
        supported: u32,
    },
    /// Underlying I/O failure.
    Io {
        detail: String,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { context, detail } => {
                write!(f, "shape mismatch in {context}: {detail}")
            }
            Error::NonFinite { context } => {
                write!(f, "non-finite value in {context}")
            }
            Error::Domain { context, detail } => {
                write!(f, "domain error in {context}: {detail}")
            }
            Error::Contract { context, detail } => {
                write!(f, "contract violation in {context}: {detail}")
            }
            Error::TrainingAbort { stage, detail } => {
                write!(f, "training aborted in stage `{stage}`: {detail}")
            }
            Error::Parse { path, line, detail } => {
                if *line == 0 {
                    write!(f, "parse error in {path}: {detail}")
                } else {
                    write!(f, "parse error in {path} at line {line}: {detail}")
                }
            }
            Error::Integrity { detail } => write!(f, "integrity error: {detail}"),
            Error::VersionMismatch { found, supported } => {
                write!(
                    f,
                    "checkpoint version {found} is not supported (this build reads version {supported})"
                )
            }
            Error::Io { detail } => write!(f, "i/o error: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io {
            detail: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
