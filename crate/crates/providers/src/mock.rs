//! Scripted deterministic provider. Rules are matched against the request
//! transcript; anything unmatched gets a fallback derived from a hash of
//! the input, so identical inputs always produce identical outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use aho_corasick::AhoCorasick;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ProviderError, Result};
use crate::types::{ChatRequest, ChatResponse, PositionLogprobs, TokenCandidate, TokenLogprobs};
use crate::{ChatProvider, EmbeddingProvider, NliProvider};

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

/// Failure a rule can inject in place of a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MockFailure {
    Transport,
    Http { status: u16 },
    Capability,
    Malformed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Log-probabilities of the answer-letter candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_logprobs: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<MockFailure>,
}

impl MockResponse {
    pub fn text(text: &str) -> Self {
        Self {
            text: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn labels(labels: &[(&str, f64)]) -> Self {
        Self {
            label_logprobs: Some(labels.iter().map(|(l, lp)| (l.to_string(), *lp)).collect()),
            ..Self::default()
        }
    }

    pub fn failure(error: MockFailure) -> Self {
        Self {
            error: Some(error),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRule {
    /// Exact request hash (see [`ChatRequest::hash`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
    /// Substrings that must all occur in the transcript.
    #[serde(default)]
    pub contains: Vec<String>,
    pub response: MockResponse,
}

impl ChatRule {
    pub fn contains(needles: &[&str], response: MockResponse) -> Self {
        Self {
            hash: None,
            contains: needles.iter().map(|s| s.to_string()).collect(),
            response,
        }
    }

    pub fn hash(hash: impl Into<String>, response: MockResponse) -> Self {
        Self {
            hash: Some(hash.into()),
            contains: Vec::new(),
            response,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliRule {
    /// Substrings that must all occur in the hypothesis.
    #[serde(default)]
    pub contains: Vec<String>,
    /// Substrings that must all occur in the premise.
    #[serde(default)]
    pub premise_contains: Vec<String>,
    pub scores: [f64; 3],
}

impl NliRule {
    pub fn new(needles: &[&str], scores: [f64; 3]) -> Self {
        Self {
            contains: needles.iter().map(|s| s.to_string()).collect(),
            premise_contains: Vec::new(),
            scores,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub chat: Vec<ChatRule>,
    /// Exact text to raw vector.
    #[serde(default)]
    pub embed: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub nli: Vec<NliRule>,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

fn default_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            chat: Vec::new(),
            embed: BTreeMap::new(),
            nli: Vec::new(),
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

impl MockScript {
    pub fn add_embedding(&mut self, text: &str, vector: Vec<f64>) {
        self.embed.insert(text.to_string(), vector);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Script(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&raw).map_err(|e| ProviderError::Script(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = serde_json::to_string(self).map_err(|e| ProviderError::Script(e.to_string()))?;
        std::fs::write(path, raw).map_err(|e| ProviderError::Script(format!("{}: {e}", path.display())))
    }

    /// Appends `other`'s rules after this script's rules.
    pub fn extend(&mut self, other: MockScript) {
        self.chat.extend(other.chat);
        self.embed.extend(other.embed);
        self.nli.extend(other.nli);
    }

    fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(ProviderError::Script("embedding_dim must be positive".into()));
        }
        for (i, rule) in self.chat.iter().enumerate() {
            if rule.hash.is_none() && rule.contains.is_empty() {
                return Err(ProviderError::Script(format!("chat rule {i} matches nothing")));
            }
            if rule.contains.iter().any(String::is_empty) {
                return Err(ProviderError::Script(format!("chat rule {i} has an empty needle")));
            }
            if let Some(map) = &rule.response.label_logprobs {
                if map.values().any(|v| !v.is_finite() || *v > 0.0) {
                    return Err(ProviderError::Script(format!("chat rule {i} has invalid logprobs")));
                }
            }
        }
        Ok(())
    }
}

/// Multi-pattern matcher returning the first rule, in script order, whose
/// needles all occur in the haystack.
#[derive(Debug)]
struct RuleMatcher {
    automaton: Option<AhoCorasick>,
    /// Rule indices per pattern id.
    owners: Vec<Vec<usize>>,
    needed: Vec<usize>,
}

impl RuleMatcher {
    fn new<'a>(rules: impl Iterator<Item = &'a [String]>) -> Result<Self> {
        let mut patterns: Vec<&str> = Vec::new();
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut owners: Vec<Vec<usize>> = Vec::new();
        let mut needed = Vec::new();
        for (r, needles) in rules.enumerate() {
            let unique: BTreeSet<&str> = needles.iter().map(String::as_str).collect();
            needed.push(unique.len());
            for n in unique {
                let id = *index.entry(n).or_insert_with(|| {
                    patterns.push(n);
                    owners.push(Vec::new());
                    patterns.len() - 1
                });
                owners[id].push(r);
            }
        }
        let automaton = if patterns.is_empty() {
            None
        } else {
            Some(AhoCorasick::new(&patterns).map_err(|e| ProviderError::Script(e.to_string()))?)
        };
        Ok(Self {
            automaton,
            owners,
            needed,
        })
    }

    /// Rules whose needles all occur, in ascending order.
    fn matching(&self, haystack: &str) -> Vec<usize> {
        let mut hits = vec![0usize; self.needed.len()];
        if let Some(ac) = &self.automaton {
            let mut seen = BTreeSet::new();
            for m in ac.find_overlapping_iter(haystack) {
                if seen.insert(m.pattern().as_usize()) {
                    for &r in &self.owners[m.pattern().as_usize()] {
                        hits[r] += 1;
                    }
                }
            }
        }
        (0..self.needed.len()).filter(|&r| hits[r] == self.needed[r]).collect()
    }
}

#[derive(Debug, Default)]
pub struct CallCounts {
    pub chat: AtomicU64,
    pub embed: AtomicU64,
    pub nli: AtomicU64,
}

#[derive(Debug)]
pub struct MockProvider {
    script: MockScript,
    chat_matcher: RuleMatcher,
    nli_matcher: RuleMatcher,
    fingerprint: String,
    pub calls: CallCounts,
}

impl MockProvider {
    /// Panics on an invalid script; use [`MockProvider::try_new`] for
    /// untrusted input.
    pub fn new(script: MockScript) -> Self {
        Self::try_new(script).expect("invalid mock script")
    }

    pub fn try_new(script: MockScript) -> Result<Self> {
        script.validate()?;
        let chat_matcher = RuleMatcher::new(script.chat.iter().map(|r| r.contains.as_slice()))?;
        let nli_matcher = RuleMatcher::new(script.nli.iter().map(|r| r.contains.as_slice()))?;
        let raw = serde_json::to_vec(&script).map_err(|e| ProviderError::Script(e.to_string()))?;
        let fingerprint = hex::encode(&Sha256::digest(&raw)[..6]);
        Ok(Self {
            script,
            chat_matcher,
            nli_matcher,
            fingerprint,
            calls: CallCounts::default(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::try_new(MockScript::load(path)?)
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn find_chat_rule(&self, request: &ChatRequest) -> Option<&ChatRule> {
        let transcript = request.transcript();
        let hash = self.script.chat.iter().any(|r| r.hash.is_some()).then(|| request.hash());
        self.chat_matcher
            .matching(&transcript)
            .into_iter()
            .map(|i| &self.script.chat[i])
            .find(|r| match (&r.hash, &hash) {
                (Some(want), Some(got)) => want == got,
                (Some(_), None) => false,
                (None, _) => true,
            })
    }
}

fn digest(parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

fn label_response(map: &BTreeMap<String, f64>, text: Option<&str>, request: &ChatRequest) -> ChatResponse {
    let mut candidates: Vec<TokenCandidate> = map
        .iter()
        .map(|(t, lp)| TokenCandidate {
            token: t.clone(),
            logprob: *lp,
        })
        .collect();
    candidates.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.token.cmp(&b.token)));
    candidates.truncate(request.logprob_top_n.max(1) as usize);
    let top = candidates.first().map(|c| c.token.clone()).unwrap_or_default();
    let fixed = |t: &str| PositionLogprobs {
        token: t.into(),
        candidates: vec![TokenCandidate {
            token: t.into(),
            logprob: 0.0,
        }],
    };
    let logprobs = request.want_logprobs.then(|| TokenLogprobs {
        positions: vec![
            fixed("Answer"),
            fixed("|"),
            PositionLogprobs {
                token: top.clone(),
                candidates,
            },
        ],
    });
    ChatResponse {
        text: text.map_or_else(|| format!("Answer|{top}"), str::to_string),
        logprobs,
        request_id: String::new(),
        retries: 0,
    }
}

fn failure(f: &MockFailure) -> ProviderError {
    match f {
        MockFailure::Transport => ProviderError::Transport("scripted transport failure".into()),
        MockFailure::Http { status } => ProviderError::Http {
            status: *status,
            body: "scripted".into(),
        },
        MockFailure::Capability => ProviderError::Capability("scripted capability failure".into()),
        MockFailure::Malformed => ProviderError::Malformed("scripted malformed output".into()),
    }
}

const FALLBACK_LABELS: [&str; 8] = ["A", "B", "C", "D", "E", "F", "G", "H"];

impl ChatProvider for MockProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        request.validate()?;
        self.calls.chat.fetch_add(1, Ordering::Relaxed);
        let hash = request.hash();
        let mut resp = match self.find_chat_rule(request) {
            Some(rule) => {
                let r = &rule.response;
                if let Some(f) = &r.error {
                    return Err(failure(f));
                }
                match (&r.label_logprobs, &r.text) {
                    (Some(map), text) => label_response(map, text.as_deref(), request),
                    (None, Some(text)) => ChatResponse {
                        text: text.clone(),
                        logprobs: None,
                        request_id: String::new(),
                        retries: 0,
                    },
                    (None, None) => return Err(ProviderError::Script("rule has no response".into())),
                }
            }
            None if request.want_logprobs => {
                let d = digest(&[&hash]);
                let map = FALLBACK_LABELS
                    .iter()
                    .zip(d)
                    .map(|(l, b)| (l.to_string(), -(f64::from(b) / 255.0) * 4.0 - 0.01))
                    .collect();
                label_response(&map, None, request)
            }
            None => ChatResponse {
                text: format!("mock response {}", &hash[..12]),
                logprobs: None,
                request_id: String::new(),
                retries: 0,
            },
        };
        resp.request_id = format!("mock-{}", &hash[..16]);
        Ok(resp)
    }

    fn identity(&self) -> String {
        format!("mock:{}", self.fingerprint)
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Signed hashed bag of words.
pub fn hashed_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for w in words(text) {
        let h = fnv1a(w.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    if v.iter().all(|x| *x == 0.0) {
        v[(fnv1a(text.as_bytes()) % dim as u64) as usize] = 1.0;
    }
    v
}

impl EmbeddingProvider for MockProvider {
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.calls.embed.fetch_add(1, Ordering::Relaxed);
        Ok(texts
            .iter()
            .map(|t| match self.script.embed.get(t) {
                Some(v) => v.clone(),
                None => hashed_embedding(t, self.script.embedding_dim),
            })
            .collect())
    }

    fn identity(&self) -> String {
        format!("mock-embed:{}", self.fingerprint)
    }
}

/// Word-overlap Jaccard index.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let a: BTreeSet<String> = words(a).collect();
    let b: BTreeSet<String> = words(b).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

impl NliProvider for MockProvider {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<[f64; 3]> {
        self.calls.nli.fetch_add(1, Ordering::Relaxed);
        let rule = self
            .nli_matcher
            .matching(hypothesis)
            .into_iter()
            .map(|i| &self.script.nli[i])
            .find(|r| r.premise_contains.iter().all(|p| premise.contains(p.as_str())));
        if let Some(rule) = rule {
            return Ok(rule.scores);
        }
        let e = 0.05 + 0.9 * jaccard(premise, hypothesis);
        let c = (1.0 - e) * 0.3;
        Ok([e, 1.0 - e - c, c])
    }

    fn identity(&self) -> String {
        format!("mock-nli:{}", self.fingerprint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_matching_rule_wins() {
        let mut s = MockScript::default();
        s.chat.push(ChatRule::contains(&["alpha", "beta"], MockResponse::text("both")));
        s.chat.push(ChatRule::contains(&["alpha"], MockResponse::text("one")));
        let m = MockProvider::new(s);
        assert_eq!(m.chat(&ChatRequest::user("beta then alpha")).unwrap().text, "both");
        assert_eq!(m.chat(&ChatRequest::user("alpha only")).unwrap().text, "one");
        assert!(m.chat(&ChatRequest::user("neither")).unwrap().text.starts_with("mock response"));
        assert_eq!(m.calls.chat.load(Ordering::Relaxed), 3);
    }

    #[test]
    fn hash_rule_matches_exact_request() {
        let req = ChatRequest::user("exact").temperature(0.3);
        let mut s = MockScript::default();
        s.chat.push(ChatRule::hash(req.hash(), MockResponse::text("hit")));
        let m = MockProvider::new(s);
        assert_eq!(m.chat(&req).unwrap().text, "hit");
        assert_ne!(m.chat(&ChatRequest::user("exact")).unwrap().text, "hit");
    }

    #[test]
    fn fallbacks_are_deterministic() {
        let a = MockProvider::new(MockScript::default());
        let b = MockProvider::new(MockScript::default());
        let req = ChatRequest::user("why").with_logprobs(5);
        let (ra, rb) = (a.chat(&req).unwrap(), b.chat(&req).unwrap());
        assert_eq!(ra, rb);
        assert_eq!(ra.logprobs.unwrap().positions[2].candidates.len(), 5);
        assert_eq!(
            a.embed_raw(&["some text".into()]).unwrap(),
            b.embed_raw(&["some text".into()]).unwrap()
        );
    }

    #[test]
    fn labels_are_sorted_and_truncated() {
        let mut s = MockScript::default();
        s.chat.push(ChatRule::contains(
            &["q"],
            MockResponse::labels(&[("A", -3.0), ("B", -0.5), ("C", -1.0)]),
        ));
        let m = MockProvider::new(s);
        let r = m.chat(&ChatRequest::user("q").with_logprobs(2)).unwrap();
        assert_eq!(r.text, "Answer|B");
        let pos = &r.logprobs.unwrap().positions[2];
        let toks: Vec<&str> = pos.candidates.iter().map(|c| c.token.as_str()).collect();
        assert_eq!(toks, ["B", "C"]);
        assert!(m.chat(&ChatRequest::user("q")).unwrap().logprobs.is_none());
    }

    #[test]
    fn scripted_failures_surface() {
        let mut s = MockScript::default();
        s.chat.push(ChatRule::contains(&["boom"], MockResponse::failure(MockFailure::Http { status: 503 })));
        let m = MockProvider::new(s);
        let err = m.chat(&ChatRequest::user("boom")).unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn script_round_trips_through_json() {
        let mut s = MockScript::default();
        s.chat.push(ChatRule::contains(&["x"], MockResponse::labels(&[("A", -0.2)])));
        s.add_embedding("doc", vec![1.0, 2.0]);
        s.nli.push(NliRule::new(&["h"], [0.2, 0.3, 0.5]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        s.save(&path).unwrap();
        assert_eq!(MockScript::load(&path).unwrap(), s);
        let parsed: MockScript = serde_json::from_str(r#"{"chat":[{"contains":["x"],"response":{"text":"t"}}]}"#).unwrap();
        assert_eq!(parsed.embedding_dim, DEFAULT_EMBEDDING_DIM);
    }

    #[test]
    fn invalid_scripts_are_rejected() {
        let mut s = MockScript::default();
        s.chat.push(ChatRule::contains(&[], MockResponse::text("x")));
        assert!(MockProvider::try_new(s).is_err());
    }

    #[test]
    fn jaccard_bounds() {
        assert_eq!(jaccard("a b", "a b"), 1.0);
        assert_eq!(jaccard("a", "b"), 0.0);
        assert!((jaccard("a b c", "a b d") - 0.5).abs() < 1e-12);
    }
}
