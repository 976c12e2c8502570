use std::path::Path;

use depthpatch_core::Error as CoreError;

/// Failures grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training failed: {0}")]
    Training(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) => 3,
            AppError::Training(_) => 4,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        AppError::Data(format!("{}: {e}", path.display()))
    }

    /// Core errors raised while optimizing count as training failures
    /// unless they are plainly about the configuration.
    pub fn training(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => e.into(),
            CoreError::NoTargets { .. } => e.into(),
            other => AppError::Training(other.to_string()),
        }
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => AppError::Config(m),
            CoreError::Diverged { .. } => AppError::Training(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
