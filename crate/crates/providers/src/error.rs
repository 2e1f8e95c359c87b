use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProviderError {
    /// Connection-level failure; safe to retry.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    /// The backend cannot do what the request needs (e.g. no logprobs).
    #[error("capability error: {0}")]
    Capability(String),
    #[error("malformed backend output: {0}")]
    Malformed(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("mock script: {0}")]
    Script(String),
}

impl ProviderError {
    /// Transport failures, 429 and 5xx are retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) => true,
            ProviderError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub type Result<T, E = ProviderError> = std::result::Result<T, E>;
