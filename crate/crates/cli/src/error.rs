use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] expo_core::Error),

    #[error(transparent)]
    Service(#[from] expo_service::ServiceError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact {0}")]
    Missing(PathBuf),

    #[error("malformed artifact {path}: {source}")]
    Artifact {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Stable identifier printed in the machine-readable error line.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(expo_core::Error::Diverged { .. }) => "diverged",
            CliError::Core(expo_core::Error::Config(_)) | CliError::Config(_) => "config",
            CliError::Core(_) => "core",
            CliError::Service(_) => "service",
            CliError::Io { .. } => "io",
            CliError::Missing(_) => "missing_artifact",
            CliError::Artifact { .. } => "malformed_artifact",
        }
    }
}
