//! Client contracts for the three model services the evaluation pipeline
//! needs (chat with token log-probabilities, text embeddings, NLI), an
//! HTTP implementation, and a scripted deterministic mock.

pub mod error;
pub mod http;
pub mod limiter;
pub mod mock;
pub mod options;
pub mod types;

use std::sync::Arc;

pub use error::{ProviderError, Result};
pub use options::{score_options, ScoreOptions, ScoredOptions};
pub use types::{
    ChatMessage, ChatRequest, ChatResponse, NliVerdict, PositionLogprobs, TokenCandidate,
    TokenLogprobs,
};

pub trait ChatProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse>;
    /// Backend identity recorded in run metadata.
    fn identity(&self) -> String;
}

pub trait EmbeddingProvider: Send + Sync {
    /// Raw backend vectors; callers go through [`embed`] for normalization.
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
    fn identity(&self) -> String;
}

pub trait NliProvider: Send + Sync {
    /// Raw (entail, neutral, contradict) scores as the backend reports them.
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<[f64; 3]>;
    fn identity(&self) -> String;
}

/// The provider set a run is wired to.
#[derive(Clone)]
pub struct Providers {
    pub chat: Arc<dyn ChatProvider>,
    pub embed: Arc<dyn EmbeddingProvider>,
    pub nli: Arc<dyn NliProvider>,
}

impl Providers {
    /// Every provider backed by the same mock.
    pub fn mock(mock: Arc<mock::MockProvider>) -> Self {
        Self {
            chat: mock.clone(),
            embed: mock.clone(),
            nli: mock,
        }
    }

    pub fn identities(&self) -> [String; 3] {
        [self.chat.identity(), self.embed.identity(), self.nli.identity()]
    }
}

/// Embeds `texts` and L2-normalizes every vector.
pub fn embed(provider: &dyn EmbeddingProvider, texts: &[String]) -> Result<Vec<Vec<f64>>> {
    if texts.is_empty() {
        return Err(ProviderError::Argument("nothing to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(ProviderError::Argument(format!("text {i} in batch is empty")));
    }
    let mut vecs = provider.embed_raw(texts)?;
    if vecs.len() != texts.len() {
        return Err(ProviderError::Malformed(format!(
            "{} vectors for {} texts",
            vecs.len(),
            texts.len()
        )));
    }
    let dim = vecs[0].len();
    for v in &mut vecs {
        if v.len() != dim || dim == 0 {
            return Err(ProviderError::Malformed(format!(
                "embedding dimension mismatch in batch ({} vs {dim})",
                v.len()
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(ProviderError::Malformed("zero or non-finite embedding".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(vecs)
}

pub fn embed_one(provider: &dyn EmbeddingProvider, text: &str) -> Result<Vec<f64>> {
    Ok(embed(provider, &[text.to_string()])?.remove(0))
}

/// NLI verdict plus whether the backend output had to be renormalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NliOutcome {
    pub verdict: NliVerdict,
    pub renormalized: bool,
}

pub fn nli(provider: &dyn NliProvider, premise: &str, hypothesis: &str) -> Result<NliOutcome> {
    if premise.trim().is_empty() || hypothesis.trim().is_empty() {
        return Err(ProviderError::Argument("NLI premise and hypothesis must be non-empty".into()));
    }
    let raw = provider.classify(premise, hypothesis)?;
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ProviderError::Malformed(format!("NLI scores {raw:?}")));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(ProviderError::Malformed("NLI scores sum to zero".into()));
    }
    let renormalized = (total - 1.0).abs() > 1e-6;
    let [e, n, c] = raw.map(|v| v / total);
    Ok(NliOutcome {
        verdict: NliVerdict {
            entail: e,
            neutral: n,
            contradict: c,
        },
        renormalized,
    })
}
