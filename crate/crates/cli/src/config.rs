//! Run configuration: a TOML file, overridden by `URAGC_*` environment
//! variables, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use uragc_engine::evaluation::{EvalConfig, ProtocolKind, ProtocolSpec};
use uragc_engine::forge::ForgeConfig;
use uragc_engine::strategy::StrategyKind;
use uragc_providers::http::{ChatNli, Endpoint, HttpChat, HttpEmbedder, HttpNli, ENV_API_KEY, ENV_CHAT_URL, ENV_EMBED_URL, ENV_NLI_URL};
use uragc_providers::mock::MockProvider;
use uragc_providers::{ChatProvider, EmbeddingProvider, NliProvider, Providers};

pub const ENV_SEED: &str = "URAGC_SEED";
pub const ENV_ALPHA: &str = "URAGC_ALPHA";
pub const ENV_OUT: &str = "URAGC_OUT";
pub const ENV_MOCK: &str = "URAGC_MOCK";
pub const ENV_STRATEGY: &str = "URAGC_STRATEGY";
pub const ENV_PROTOCOL: &str = "URAGC_PROTOCOL";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: Option<String>,
    pub model: String,
    /// Name of the variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub chat: EndpointConfig,
    pub embed: EndpointConfig,
    pub nli: EndpointConfig,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    /// Corpus name (as referenced by instances) to document file.
    pub corpora: BTreeMap<String, PathBuf>,
    /// Saved split; drawn from `split_fraction` and `seed` when absent.
    pub split: Option<PathBuf>,
    pub split_fraction: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub mock: Option<PathBuf>,
    /// Directory of prompt template overrides.
    pub prompts: Option<PathBuf>,
    pub strategies: Vec<String>,
    pub protocol: ProtocolSpec,
    pub eval: EvalConfig,
    pub forge: ForgeConfig,
    /// Question/answer pairs for forging.
    pub seeds: Option<PathBuf>,
    pub providers: ProvidersConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            corpora: BTreeMap::new(),
            split: None,
            split_fraction: 0.5,
            seed: 0,
            out: PathBuf::from("out"),
            mock: None,
            prompts: None,
            strategies: vec![StrategyKind::Naive.name().to_string()],
            protocol: ProtocolSpec::default(),
            eval: EvalConfig::default(),
            forge: ForgeConfig::default(),
            seeds: None,
            providers: ProvidersConfig::default(),
        }
    }
}

/// Flag values that override the file and environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mock: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub strategies: Option<Vec<String>>,
    pub protocol: Option<String>,
    pub k: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub seeds: Option<PathBuf>,
    pub k_list: Option<Vec<usize>>,
}

fn field_err<E: std::fmt::Display>(field: &str) -> impl FnOnce(E) -> anyhow::Error + '_ {
    move |e| anyhow::anyhow!("{field}: {e}")
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("config: {}", e.message()))
    }

    /// Loads `path` (input paths become relative to its directory), then
    /// applies `env` and `flags`.
    pub fn resolve(path: Option<&Path>, env: &dyn Fn(&str) -> Option<String>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", p.display()))?;
                let base = p.parent().unwrap_or(Path::new("."));
                for slot in [&mut cfg.dataset, &mut cfg.split, &mut cfg.mock, &mut cfg.prompts, &mut cfg.seeds]
                    .into_iter()
                    .flatten()
                {
                    rebase(base, slot);
                }
                for p in cfg.corpora.values_mut() {
                    rebase(base, p);
                }
                cfg
            }
            None => Self::default(),
        };
        cfg.apply_env(env)?;
        cfg.apply_flags(flags)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_env(&mut self, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = env(ENV_SEED) {
            self.set_seed(v.trim().parse().map_err(field_err(ENV_SEED))?);
        }
        if let Some(v) = env(ENV_ALPHA) {
            self.eval.alpha = v.trim().parse().map_err(field_err(ENV_ALPHA))?;
        }
        if let Some(v) = env(ENV_OUT) {
            self.out = PathBuf::from(v);
        }
        if let Some(v) = env(ENV_MOCK) {
            self.mock = Some(PathBuf::from(v));
        }
        if let Some(v) = env(ENV_STRATEGY) {
            self.strategies = split_list(&v);
        }
        if let Some(v) = env(ENV_PROTOCOL) {
            self.protocol.kind = v.parse().map_err(field_err(ENV_PROTOCOL))?;
        }
        for (var, ep) in [
            (ENV_CHAT_URL, &mut self.providers.chat),
            (ENV_EMBED_URL, &mut self.providers.embed),
            (ENV_NLI_URL, &mut self.providers.nli),
        ] {
            if let Some(url) = env(var) {
                ep.url = Some(url);
            }
        }
        Ok(())
    }

    fn apply_flags(&mut self, f: &Overrides) -> Result<()> {
        if let Some(s) = f.seed {
            self.set_seed(s);
        }
        if let Some(o) = &f.out {
            self.out = o.clone();
        }
        if let Some(m) = &f.mock {
            self.mock = Some(m.clone());
        }
        if let Some(a) = f.alpha {
            self.eval.alpha = a;
        }
        if let Some(s) = &f.strategies {
            self.strategies = s.clone();
        }
        if let Some(p) = &f.protocol {
            self.protocol.kind = p.parse().map_err(field_err("protocol"))?;
        }
        if let Some(k) = f.k {
            self.eval.strategy.k = k;
        }
        if let Some(d) = &f.dataset {
            self.dataset = Some(d.clone());
        }
        if let Some(s) = &f.split {
            self.split = Some(s.clone());
        }
        if let Some(s) = &f.seeds {
            self.seeds = Some(s.clone());
        }
        if let Some(k) = &f.k_list {
            self.protocol.k_list = k.clone();
        }
        Ok(())
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.eval.strategy.seed = seed;
        self.forge.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.eval.alpha;
        if !(a > 0.0 && a < 1.0) {
            bail!("alpha: {a} must lie strictly between 0 and 1");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            bail!("split_fraction: {} must lie strictly between 0 and 1", self.split_fraction);
        }
        if self.strategies.is_empty() {
            bail!("strategies: at least one strategy is required");
        }
        self.strategy_kinds()?;
        self.eval.validate().map_err(field_err("eval"))?;
        self.protocol.validate().map_err(field_err("protocol"))?;
        self.forge.validate().map_err(field_err("forge"))?;
        for (name, ep) in [
            ("providers.chat", &self.providers.chat),
            ("providers.embed", &self.providers.embed),
            ("providers.nli", &self.providers.nli),
        ] {
            if self.mock.is_some() && ep.url.is_some() {
                bail!("{name}: both a live endpoint and a mock script are configured");
            }
        }
        Ok(())
    }

    pub fn strategy_kinds(&self) -> Result<Vec<StrategyKind>> {
        self.strategies
            .iter()
            .map(|s| s.parse::<StrategyKind>().map_err(field_err("strategies")))
            .collect()
    }

    pub fn protocol_kind(&self) -> ProtocolKind {
        self.protocol.kind
    }

    /// Canonical hash of the resolved configuration.
    pub fn hash(&self) -> String {
        uragc_engine::util::json_hash(self)
    }

    /// Builds the provider set, either entirely from the mock script or
    /// from live endpoints.
    pub fn providers(&self, env: &dyn Fn(&str) -> Option<String>) -> Result<Providers> {
        if let Some(path) = &self.mock {
            let mock = MockProvider::from_file(path).with_context(|| format!("mock: loading {}", path.display()))?;
            return Ok(Providers::mock(Arc::new(mock)));
        }
        let endpoint = |name: &str, ep: &EndpointConfig| -> Result<Option<Endpoint>> {
            let Some(url) = &ep.url else { return Ok(None) };
            let mut e = Endpoint::new(url.clone(), ep.model.clone());
            let key_var = ep.api_key_env.as_deref().unwrap_or(ENV_API_KEY);
            e.api_key = env(key_var);
            if let Some(t) = ep.timeout_secs {
                e.timeout = Duration::from_secs(t);
            }
            if let Some(m) = ep.max_in_flight {
                if m == 0 {
                    bail!("{name}.max_in_flight: must be at least 1");
                }
                e.max_in_flight = m;
            }
            Ok(Some(e))
        };
        let chat_ep = endpoint("providers.chat", &self.providers.chat)?
            .context("providers.chat: no endpoint or mock script configured")?;
        let embed_ep = endpoint("providers.embed", &self.providers.embed)?
            .context("providers.embed: no endpoint or mock script configured")?;
        let chat: Arc<dyn ChatProvider> = Arc::new(HttpChat::new(chat_ep)?);
        let embed: Arc<dyn EmbeddingProvider> = Arc::new(HttpEmbedder::new(embed_ep)?);
        let nli: Arc<dyn NliProvider> = match endpoint("providers.nli", &self.providers.nli)? {
            Some(e) => Arc::new(HttpNli::new(e)?),
            None => {
                log::warn!("providers.nli: no endpoint configured; judging entailment with the chat model");
                Arc::new(ChatNli::new(chat.clone()))
            }
        };
        Ok(Providers { chat, embed, nli })
    }
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}
