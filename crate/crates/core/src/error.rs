use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::GradError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {detail}")]
    Data { path: PathBuf, detail: String },
    #[error("non-finite gradient in parameter {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("task loss is defined on labelled source samples only")]
    TargetTaskLoss,
}

impl From<GradError> for Error {
    fn from(e: GradError) -> Self {
        match e {
            GradError::Tensor(t) => Error::Tensor(t),
            GradError::NonScalarLoss(s) => Error::NonScalarLoss(s),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
