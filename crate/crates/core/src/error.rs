use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("length mismatch: {what} (expected {expected}, got {actual})")]
    LengthMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate energy: {0}")]
    DegenerateEnergy(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("shape mismatch at {layer}: {message}")]
    Shape { layer: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("single-class input: {0}")]
    SingleClass(String),

    #[error("degenerate cohort: {0}")]
    DegenerateCohort(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no convergence after {iterations} iterations: {message}")]
    NoConvergence { iterations: usize, message: String },

    #[error("missing prerequisite artifact {path:?} (needed by stage `{stage}`)")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("stale artifact {path:?}: expected hash {expected}, found {found}")]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed file {path:?}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure classes, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::UnknownArchitecture(_) | Error::Parse { .. } => {
                ErrorClass::Usage
            }
            Error::Numerical(_) | Error::NoConvergence { .. } | Error::DegenerateCohort(_) => {
                ErrorClass::Numerical
            }
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
