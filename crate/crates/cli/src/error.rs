use delta_core::ModelError;
use delta_deltagen::GenError;
use delta_metrics::MetricsError;
use thiserror::Error;

/// Command failure; the variant fixes the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Contract, configuration or verification failure (exit 1).
    #[error("{0}")]
    Contract(String),
    /// Reading or writing files failed (exit 2).
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Contract(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, e: std::io::Error) -> CliError {
        CliError::Io(format!("{}: {e}", path.as_ref().display()))
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::Io { .. } | GenError::Image { .. } => CliError::Io(e.to_string()),
            e => CliError::Contract(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Io(e.to_string()),
            e => CliError::Contract(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io { .. } => CliError::Io(e.to_string()),
            e => CliError::Contract(e.to_string()),
        }
    }
}
