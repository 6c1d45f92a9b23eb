use std::path::Path;

use thiserror::Error;
use vip_tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("budget error: {0}")]
    Budget(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("numeric failure in {stage}: {source}")]
    Numeric {
        stage: String,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            line,
            msg: msg.into(),
        }
    }

    /// True for failures caused by non-finite numbers rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}

/// Tags tensor errors with the model stage that raised them. Non-finite
/// values become [`Error::Numeric`]; everything else stays a tensor error.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: impl FnOnce() -> String) -> Result<T>;
}

impl<T> StageExt<T> for std::result::Result<T, TensorError> {
    fn stage(self, stage: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| match e {
            TensorError::NonFinite { .. } => Error::Numeric {
                stage: stage(),
                source: e,
            },
            other => Error::Tensor(other),
        })
    }
}
