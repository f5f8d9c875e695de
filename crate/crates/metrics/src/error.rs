use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("input error: {0}")]
    Input(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

impl MetricsError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> MetricsError {
        MetricsError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
