use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset not found at {0}")]
    DatasetNotFound(PathBuf),
    #[error("corrupt sample `{sample_id}`: {reason}")]
    CorruptSample { sample_id: String, reason: String },
    #[error("split `{split}` is not declared for dataset {dataset}")]
    InvalidSplit { dataset: String, split: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid config at `{path}`: {reason}")]
    InvalidConfig { path: String, reason: String },
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("integrity error for `{identifier}`: expected sha256 {expected}, found {found}")]
    Integrity {
        identifier: String,
        expected: String,
        found: String,
    },
    #[error("weights unavailable for `{identifier}`: {reason}")]
    WeightsUnavailable { identifier: String, reason: String },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("environment error: {0}")]
    Environment(String),
    #[error("precision error: {0}")]
    Precision(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid ablation matrix: {0}")]
    InvalidMatrix(String),
    #[error("unsupported checkpoint format version `{0}`")]
    UnsupportedVersion(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("serialization error: {0}")]
    Serde(String),
    #[error("run failed: {0}")]
    RunFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Coarse failure class, used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidSplit { .. }
            | Error::InvalidArgument(_)
            | Error::InvalidConfig { .. }
            | Error::InvalidSpec(_)
            | Error::InvalidMatrix(_)
            | Error::NotFound(_)
            | Error::UnsupportedVersion(_) => ErrorClass::Validation,
            Error::Environment(_) | Error::WeightsUnavailable { .. } | Error::DatasetNotFound(_) => {
                ErrorClass::Environment
            }
            _ => ErrorClass::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Environment,
    Runtime,
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<safetensors::SafeTensorError> for Error {
    fn from(e: safetensors::SafeTensorError) -> Self {
        Error::Serde(e.to_string())
    }
}
