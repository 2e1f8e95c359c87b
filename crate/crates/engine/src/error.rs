use thiserror::Error;
use uragc_core::CoreError;
use uragc_providers::ProviderError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{context}: {source}")]
    Provider {
        context: String,
        #[source]
        source: ProviderError,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Generation that never produced a usable record; `raw` is the last completion.
    #[error("forge error: {message}")]
    Forge { message: String, raw: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

pub(crate) trait ProviderContext<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ProviderContext<T> for std::result::Result<T, ProviderError> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| EngineError::Provider {
            context: what(),
            source,
        })
    }
}
