use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors are data errors: bad files, bad parameters, inconsistent inputs.
/// Callers that need process exit codes map all of these to the same code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: malformed header: {msg}")]
    MalformedHeader { path: PathBuf, msg: String },

    #[error("embedding '{id}' has dimension {got}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },

    #[error("duplicate id '{id}'")]
    DuplicateId { id: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("zero-norm vector '{id}'")]
    ZeroNorm { id: String },

    #[error("unknown id '{id}' in {context}")]
    UnknownId { id: String, context: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("need both target and nontarget trials, got only one class")]
    SingleClass,

    #[error("mismatched inputs: {0}")]
    Mismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
