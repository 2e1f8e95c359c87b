use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("embedding failed for {doc_ids}: {message}")]
    Embedding { doc_ids: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn argument(msg: impl Into<String>) -> CoreError {
    CoreError::Argument(msg.into())
}

pub(crate) fn integrity(msg: impl Into<String>) -> CoreError {
    CoreError::Integrity(msg.into())
}
