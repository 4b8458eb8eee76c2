use std::path::PathBuf;

use thiserror::Error;

use crate::kernel::KernelParams;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A covariance matrix could not be factorized even after jitter.
    #[error("numerical failure: {message} (params: {params:?})")]
    Numerical {
        message: String,
        params: KernelParams,
    },

    #[error(transparent)]
    Ingest(#[from] IngestError),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at epoch {epoch}: {message}")]
    Training {
        epoch: usize,
        message: String,
        snapshot: Vec<f64>,
    },

    #[error("negative generation failed: {0}")]
    Generation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("target column not found: {0}")]
    MissingTarget(String),
    #[error("no usable rows in {path} ({dropped} dropped)")]
    NoRows { path: PathBuf, dropped: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>, params: &KernelParams) -> Self {
        Error::Numerical {
            message: msg.into(),
            params: *params,
        }
    }
}
