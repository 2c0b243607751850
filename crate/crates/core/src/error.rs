use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("decoding error: unknown token id {0}")]
    Decoding(u32),

    #[error("length error: sequence of {len} tokens exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("definition error: {0}")]
    Definition(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint load error ({tensor}): {message}")]
    Load { tensor: String, message: String },

    #[error("vocabulary hash mismatch: checkpoint has {expected}, got {found}")]
    VocabHash { expected: String, found: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(tensor: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Load {
            tensor: tensor.into(),
            message: message.into(),
        }
    }
}
