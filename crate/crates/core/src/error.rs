use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("planning error: {0}")]
    Planning(String),

    /// The world is in a state no recovery plan can repair.
    #[error("unrecoverable state: {0}")]
    Unrecoverable(String),

    #[error("plan exhausted")]
    PlanExhausted,

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("validation error: {field}: {msg}")]
    Validation { field: String, msg: String },

    #[error("parse error in {path} at line {line}, column {column}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("unsupported schema version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("coverage error: no reference embeddings for instruction {0}")]
    Coverage(u32),

    #[error("training error: {0}")]
    Training(String),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI's error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Dim { .. } => "dimension",
            Error::Planning(_) => "planning",
            Error::Unrecoverable(_) => "unrecoverable",
            Error::PlanExhausted => "plan_exhausted",
            Error::Sequencing(_) => "sequencing",
            Error::Precondition(_) => "precondition",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Validation { .. } => "validation",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::Integrity(_) => "integrity",
            Error::Storage { .. } => "storage",
            Error::Coverage(_) => "coverage",
            Error::Training(_) => "training",
        }
    }
}
