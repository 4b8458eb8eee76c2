use std::fmt;
use std::io;

use gpnd_core::Error;
use serde::Serialize;

/// Process exit status for each failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Io,
    Config,
    Ingestion,
    Numerical,
    Training,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Io => 1,
            ErrorKind::Config => 2,
            ErrorKind::Ingestion => 3,
            ErrorKind::Numerical => 4,
            ErrorKind::Training => 5,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(Error),
    Io(io::Error),
}

impl CliError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            CliError::Config(_) => ErrorKind::Config,
            CliError::Io(_) => ErrorKind::Io,
            CliError::Core(e) => match e {
                Error::InvalidInput(_) => ErrorKind::Config,
                Error::Ingest(_) | Error::Generation(_) => ErrorKind::Ingestion,
                Error::Numerical { .. } => ErrorKind::Numerical,
                Error::Training { .. } => ErrorKind::Training,
                Error::Io(_) => ErrorKind::Io,
            },
        }
    }

    /// Machine-readable record written to stderr and `error.json`.
    pub fn record(&self) -> ErrorRecord {
        let (epoch, snapshot) = match self {
            CliError::Core(Error::Training { epoch, snapshot, .. }) => (Some(*epoch), Some(snapshot.clone())),
            _ => (None, None),
        };
        let params = match self {
            CliError::Core(Error::Numerical { params, .. }) => Some(params.to_array().to_vec()),
            _ => None,
        };
        ErrorRecord {
            kind: self.kind(),
            exit_code: self.kind().exit_code(),
            message: self.to_string(),
            epoch,
            snapshot,
            params,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Core(e) => e.fmt(f),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(io::Error::other(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(io::Error::other(e))
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: ErrorKind,
    pub exit_code: i32,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
}
