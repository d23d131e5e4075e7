use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("model validation failed: {0}")]
    Validation(#[source] mce_core::Error),
    #[error("{0}")]
    Numerical(#[from] mce_core::Error),
    #[error("too many failed replicates for {estimator}: {failures} of {replicates} (limit 5%)")]
    TooManyFailures { estimator: String, failures: usize, replicates: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    /// 0 success, 1 config/validation, 2 numerical, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::Validation(_) => 1,
            AppError::Numerical(mce_core::Error::InvalidInput(_)) => 1,
            AppError::Numerical(_) | AppError::TooManyFailures { .. } => 2,
            AppError::Io { .. } | AppError::Format { .. } => 3,
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
