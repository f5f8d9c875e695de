use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("input error: {0}")]
    Input(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("trend table does not cover {0} -> {1}")]
    Coverage(u8, u8),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("external generator: {0}")]
    External(String),
}

pub type Result<T> = std::result::Result<T, GenError>;

impl GenError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> GenError {
        GenError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Whether the failure is an I/O problem rather than a contract violation.
    pub fn is_io(&self) -> bool {
        matches!(self, GenError::Io { .. } | GenError::Image { .. } | GenError::Format { .. })
    }
}
