//! Request and response shapes shared by every backend.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ProviderError, Result};

/// Default generation temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    pub logprob_top_n: u32,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 512,
            want_logprobs: false,
            logprob_top_n: 0,
        }
    }

    pub fn user(prompt: impl Into<String>) -> Self {
        Self::new(vec![ChatMessage::user(prompt)])
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn with_logprobs(mut self, top_n: u32) -> Self {
        self.want_logprobs = true;
        self.logprob_top_n = top_n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(ProviderError::Argument("chat request has no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ProviderError::Argument(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// All message contents joined by newlines; what mock rules match against.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Stable content hash of the request (hex SHA-256 of its JSON form).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCandidate {
    pub token: String,
    pub logprob: f64,
}

/// Candidates at one generated position, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionLogprobs {
    /// Token actually generated here.
    pub token: String,
    pub candidates: Vec<TokenCandidate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub positions: Vec<PositionLogprobs>,
}

impl TokenLogprobs {
    /// Sorts candidates and rejects positive log-probabilities.
    pub fn normalize(mut self) -> Result<Self> {
        for pos in &mut self.positions {
            if pos.candidates.iter().any(|c| !(c.logprob <= 0.0)) {
                return Err(ProviderError::Malformed(format!(
                    "positive or NaN logprob at token {:?}",
                    pos.token
                )));
            }
            pos.candidates
                .sort_by(|a, b| b.logprob.partial_cmp(&a.logprob).expect("finite"));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub logprobs: Option<TokenLogprobs>,
    pub request_id: String,
    /// Retries spent before this response arrived.
    pub retries: u32,
}

/// Entailment / neutral / contradiction probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliVerdict {
    pub entail: f64,
    pub neutral: f64,
    pub contradict: f64,
}

impl NliVerdict {
    pub fn sum(&self) -> f64 {
        self.entail + self.neutral + self.contradict
    }

    pub fn is_valid(&self) -> bool {
        [self.entail, self.neutral, self.contradict]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
            && (self.sum() - 1.0).abs() <= 1e-6
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_serialized_verbatim() {
        let req = ChatRequest::user("hi").temperature(0.1);
        let json = serde_json::to_value(&req).unwrap();
        assert_eq!(json["temperature"], serde_json::json!(0.1));
        assert!(ChatRequest::user("x").temperature(2.5).validate().is_err());
        assert!(ChatRequest::new(vec![]).validate().is_err());
    }

    #[test]
    fn hash_is_content_addressed() {
        let a = ChatRequest::user("same");
        assert_eq!(a.hash(), ChatRequest::user("same").hash());
        assert_ne!(a.hash(), ChatRequest::user("other").hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn normalize_sorts_and_checks_sign() {
        let lp = TokenLogprobs {
            positions: vec![PositionLogprobs {
                token: "B".into(),
                candidates: vec![
                    TokenCandidate { token: "A".into(), logprob: -2.0 },
                    TokenCandidate { token: "B".into(), logprob: -0.1 },
                ],
            }],
        };
        let n = lp.clone().normalize().unwrap();
        assert_eq!(n.positions[0].candidates[0].token, "B");
        let mut bad = lp;
        bad.positions[0].candidates[0].logprob = 0.5;
        assert!(bad.normalize().is_err());
    }
}
