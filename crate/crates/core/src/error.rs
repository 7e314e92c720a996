use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Manifest validation failures. Each maps to its own error code.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("item `{id}` references missing feature file {path}")]
    DanglingPath { id: String, path: PathBuf },
    #[error("identity `{identity}` has no {missing} record in split `{split}`")]
    IncompleteIdentity {
        identity: String,
        split: String,
        missing: &'static str,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl ManifestError {
    pub fn code(&self) -> &'static str {
        match self {
            ManifestError::DuplicateId(_) => "manifest-duplicate-id",
            ManifestError::DanglingPath { .. } => "manifest-dangling-path",
            ManifestError::IncompleteIdentity { .. } => "manifest-incomplete-identity",
            ManifestError::Parse { .. } => "manifest-parse",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    Logic(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: usize, message: String },
    #[error("protocol {0} selects no queries")]
    EmptyProtocol(String),
    #[error("non-deterministic objective: {0}")]
    NonDeterministic(String),
    #[error("format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in single-line CLI error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Logic(_) => "logic",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Data(_) => "data",
            Error::Manifest(m) => m.code(),
            Error::Numeric { .. } => "numeric",
            Error::EmptyProtocol(_) => "empty-protocol",
            Error::NonDeterministic(_) => "non-deterministic",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }
}
