//! HTTP backends speaking the common chat-completions / embeddings JSON
//! shapes, plus a single-endpoint NLI classifier.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{ProviderError, Result};
use crate::limiter::{RetryPolicy, Semaphore, DEFAULT_MAX_IN_FLIGHT};
use crate::types::{ChatRequest, ChatResponse, PositionLogprobs, TokenCandidate, TokenLogprobs};
use crate::{ChatProvider, EmbeddingProvider, NliProvider};

pub const ENV_CHAT_URL: &str = "URAGC_CHAT_URL";
pub const ENV_EMBED_URL: &str = "URAGC_EMBED_URL";
pub const ENV_NLI_URL: &str = "URAGC_NLI_URL";
pub const ENV_API_KEY: &str = "URAGC_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct Endpoint {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Endpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            retry: RetryPolicy::default(),
        }
    }
}

/// Appends the conventional path when `url` stops at the host or `/v1`.
pub fn resolve_url(url: &str, path: &str) -> String {
    let trimmed = url.trim_end_matches('/');
    if trimmed.ends_with(path) {
        trimmed.to_string()
    } else if trimmed.ends_with("/v1") {
        format!("{trimmed}{}", path.trim_start_matches("/v1"))
    } else {
        format!("{trimmed}{path}")
    }
}

#[derive(Debug, Default)]
pub struct Telemetry {
    pub requests: AtomicU64,
    pub retries: AtomicU64,
}

struct HttpClient {
    endpoint: Endpoint,
    url: String,
    http: reqwest::blocking::Client,
    limiter: Arc<Semaphore>,
    telemetry: Arc<Telemetry>,
}

impl HttpClient {
    fn new(endpoint: Endpoint, path: Option<&str>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let url = match path {
            Some(p) => resolve_url(&endpoint.url, p),
            None => endpoint.url.clone(),
        };
        Ok(Self {
            limiter: Arc::new(Semaphore::new(endpoint.max_in_flight)),
            url,
            endpoint,
            http,
            telemetry: Arc::default(),
        })
    }

    fn post(&self, body: &Value) -> Result<(Value, u32)> {
        let _permit = self.limiter.acquire();
        let (value, retries) = self.endpoint.retry.run(|| {
            self.telemetry.requests.fetch_add(1, Ordering::Relaxed);
            let mut req = self.http.post(&self.url).json(body);
            if let Some(key) = &self.endpoint.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req
                .send()
                .map_err(|e| ProviderError::Transport(e.to_string()))?;
            let status = resp.status();
            let text = resp
                .text()
                .map_err(|e| ProviderError::Transport(e.to_string()))?;
            if !status.is_success() {
                return Err(ProviderError::Http {
                    status: status.as_u16(),
                    body: text,
                });
            }
            serde_json::from_str::<Value>(&text)
                .map_err(|e| ProviderError::Malformed(format!("{e}: {text}")))
        })?;
        self.telemetry
            .retries
            .fetch_add(u64::from(retries), Ordering::Relaxed);
        Ok((value, retries))
    }

    fn identity(&self, kind: &str) -> String {
        format!("{kind}:{}@{}", self.endpoint.model, self.url)
    }
}

/// JSON body for a chat-completions request.
pub fn chat_body(model: &str, req: &ChatRequest) -> Value {
    let mut body = json!({
        "model": model,
        "messages": req.messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    });
    if req.want_logprobs {
        body["logprobs"] = json!(true);
        body["top_logprobs"] = json!(req.logprob_top_n);
    }
    body
}

/// Extracts text, logprobs and id from a chat-completions response.
pub fn parse_chat_response(v: &Value) -> Result<(String, Option<TokenLogprobs>, String)> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ProviderError::Malformed("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .or_else(|| choice.get("text").and_then(Value::as_str))
        .ok_or_else(|| ProviderError::Malformed("choice has no content".into()))?
        .to_string();
    let logprobs = match choice.pointer("/logprobs/content").and_then(Value::as_array) {
        None => None,
        Some(items) => {
            let mut positions = Vec::with_capacity(items.len());
            for item in items {
                let token = item.get("token").and_then(Value::as_str).unwrap_or_default();
                let mut candidates = Vec::new();
                if let Some(top) = item.get("top_logprobs").and_then(Value::as_array) {
                    for c in top {
                        let (Some(t), Some(lp)) = (
                            c.get("token").and_then(Value::as_str),
                            c.get("logprob").and_then(Value::as_f64),
                        ) else {
                            return Err(ProviderError::Malformed(format!("bad top_logprobs entry {c}")));
                        };
                        candidates.push(TokenCandidate { token: t.into(), logprob: lp });
                    }
                }
                if candidates.is_empty() {
                    if let Some(lp) = item.get("logprob").and_then(Value::as_f64) {
                        candidates.push(TokenCandidate { token: token.into(), logprob: lp });
                    }
                }
                positions.push(PositionLogprobs { token: token.into(), candidates });
            }
            Some(TokenLogprobs { positions }.normalize()?)
        }
    };
    let id = v.get("id").and_then(Value::as_str).unwrap_or_default().to_string();
    Ok((text, logprobs, id))
}

pub struct HttpChat {
    client: HttpClient,
}

impl HttpChat {
    pub fn new(endpoint: Endpoint) -> Result<Self> {
        Ok(Self {
            client: HttpClient::new(endpoint, Some("/v1/chat/completions"))?,
        })
    }

    pub fn telemetry(&self) -> Arc<Telemetry> {
        self.client.telemetry.clone()
    }
}

impl ChatProvider for HttpChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        request.validate()?;
        let (v, retries) = self.client.post(&chat_body(&self.client.endpoint.model, request))?;
        let (text, logprobs, request_id) = parse_chat_response(&v)?;
        if request.want_logprobs && logprobs.is_none() {
            log::debug!("backend ignored logprobs request");
        }
        Ok(ChatResponse {
            text,
            logprobs,
            request_id,
            retries,
        })
    }

    fn identity(&self) -> String {
        self.client.identity("chat")
    }
}

pub struct HttpEmbedder {
    client: HttpClient,
}

impl HttpEmbedder {
    pub fn new(endpoint: Endpoint) -> Result<Self> {
        Ok(Self {
            client: HttpClient::new(endpoint, Some("/v1/embeddings"))?,
        })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({ "model": self.client.endpoint.model, "input": texts });
        let (v, _) = self.client.post(&body)?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Malformed("embedding response has no data".into()))?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (i, item) in data.iter().enumerate() {
            let idx = item.get("index").and_then(Value::as_u64).map_or(i, |x| x as usize);
            let vec = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| ProviderError::Malformed("item has no embedding".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| ProviderError::Malformed("non-numeric embedding".into())))
                .collect::<Result<Vec<f64>>>()?;
            rows.push((idx, vec));
        }
        rows.sort_by_key(|r| r.0);
        Ok(rows.into_iter().map(|r| r.1).collect())
    }

    fn identity(&self) -> String {
        self.client.identity("embed")
    }
}

/// Reads `(entail, neutral, contradict)` from either a keyed object or a
/// list of `{label, score}` records (optionally nested one level).
pub fn parse_nli_scores(v: &Value) -> Result<[f64; 3]> {
    let bad = || ProviderError::Malformed(format!("unrecognized NLI output {v}"));
    let slot = |label: &str| {
        let l = label.to_ascii_lowercase();
        if l.starts_with("entail") {
            Some(0)
        } else if l.starts_with("neutral") {
            Some(1)
        } else if l.starts_with("contradict") {
            Some(2)
        } else {
            None
        }
    };
    let mut out = [None; 3];
    match v {
        Value::Object(map) => {
            for (k, val) in map {
                if let (Some(i), Some(x)) = (slot(k), val.as_f64()) {
                    out[i] = Some(x);
                }
            }
        }
        Value::Array(items) => {
            let items = match items.first() {
                Some(Value::Array(inner)) => inner,
                _ => items,
            };
            for item in items {
                let label = item.get("label").and_then(Value::as_str).ok_or_else(bad)?;
                let score = item.get("score").and_then(Value::as_f64).ok_or_else(bad)?;
                if let Some(i) = slot(label) {
                    out[i] = Some(score);
                }
            }
        }
        _ => return Err(bad()),
    }
    match out {
        [Some(e), Some(n), Some(c)] => Ok([e, n, c]),
        _ => Err(bad()),
    }
}

pub struct HttpNli {
    client: HttpClient,
}

impl HttpNli {
    pub fn new(endpoint: Endpoint) -> Result<Self> {
        Ok(Self {
            client: HttpClient::new(endpoint, None)?,
        })
    }
}

impl NliProvider for HttpNli {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<[f64; 3]> {
        let body = json!({
            "model": self.client.endpoint.model,
            "premise": premise,
            "hypothesis": hypothesis,
        });
        let (v, _) = self.client.post(&body)?;
        parse_nli_scores(&v)
    }

    fn identity(&self) -> String {
        self.client.identity("nli")
    }
}

/// NLI through a chat model asked for a JSON verdict.
pub struct ChatNli {
    chat: Arc<dyn ChatProvider>,
}

impl ChatNli {
    pub fn new(chat: Arc<dyn ChatProvider>) -> Self {
        Self { chat }
    }

    pub fn prompt(premise: &str, hypothesis: &str) -> String {
        format!(
            "Decide whether the premise entails, is neutral to, or contradicts the hypothesis.\n\
             Reply with JSON only: {{\"entailment\": p, \"neutral\": p, \"contradiction\": p}} \
             where the probabilities sum to 1.\n\nPremise: {premise}\nHypothesis: {hypothesis}"
        )
    }
}

impl NliProvider for ChatNli {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<[f64; 3]> {
        let resp = self
            .chat
            .chat(&ChatRequest::user(Self::prompt(premise, hypothesis)).temperature(0.0))?;
        let text = resp.text.trim();
        let (Some(start), Some(end)) = (text.find('{'), text.rfind('}')) else {
            return Err(ProviderError::Malformed(format!("no JSON object in {text:?}")));
        };
        let v: Value = serde_json::from_str(&text[start..=end])
            .map_err(|e| ProviderError::Malformed(format!("{e}: {text:?}")))?;
        parse_nli_scores(&v)
    }

    fn identity(&self) -> String {
        format!("chat-nli({})", self.chat.identity())
    }
}
