use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("vocabulary error: unknown category `{0}`")]
    Vocabulary(String),
    #[error("empty attention: query row {row} admits no keys")]
    EmptyAttention { row: usize },
    #[error("argument error: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
