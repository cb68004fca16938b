use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("parse error in record {record}: {message}")]
    Parse { record: String, message: String },

    #[error("capacity error: requested {requested}, only {available} available")]
    Capacity { requested: usize, available: usize },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("solver did not converge after {iterations} iterations (KKT violation {violation:.3e})")]
    Convergence { iterations: usize, violation: f64 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short tag used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedInput(_) => "malformed_input",
            Error::Parse { .. } => "parse",
            Error::Capacity { .. } => "capacity",
            Error::Index { .. } => "index",
            Error::Config(_) => "config",
            Error::Training(_) => "training",
            Error::Convergence { .. } => "convergence",
            Error::Integrity(_) => "integrity",
            Error::Lookup(_) => "lookup",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn parse(record: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            record: record.into(),
            message: message.into(),
        }
    }
}
