use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use uragc_providers::ScoreOptions;

use crate::error::{EngineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    NoRetrieve,
    Naive,
    Fusion,
    Hyde,
    Raptor,
    Replug,
    SelfRag,
    Rat,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::NoRetrieve,
        StrategyKind::Naive,
        StrategyKind::Fusion,
        StrategyKind::Hyde,
        StrategyKind::Raptor,
        StrategyKind::Replug,
        StrategyKind::SelfRag,
        StrategyKind::Rat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::NoRetrieve => "no_retrieve",
            StrategyKind::Naive => "naive",
            StrategyKind::Fusion => "fusion",
            StrategyKind::Hyde => "hyde",
            StrategyKind::Raptor => "raptor",
            StrategyKind::Replug => "replug",
            StrategyKind::SelfRag => "self_rag",
            StrategyKind::Rat => "rat",
        }
    }

    /// Display label used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::NoRetrieve => "W/o Retrieve",
            StrategyKind::Naive => "Naive RAG",
            StrategyKind::Fusion => "Fusion RAG",
            StrategyKind::Hyde => "HyDE",
            StrategyKind::Raptor => "RAPTOR",
            StrategyKind::Replug => "REPLUG",
            StrategyKind::SelfRag => "Self-RAG",
            StrategyKind::Rat => "RAT",
        }
    }

    pub fn needs_index(self) -> bool {
        self != StrategyKind::NoRetrieve
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Ok(match key.as_str() {
            "noretrieve" | "noretrieval" | "norag" | "none" => StrategyKind::NoRetrieve,
            "naive" | "naiverag" => StrategyKind::Naive,
            "fusion" | "fusionrag" | "ragfusion" => StrategyKind::Fusion,
            "hyde" => StrategyKind::Hyde,
            "raptor" => StrategyKind::Raptor,
            "replug" => StrategyKind::Replug,
            "selfrag" => StrategyKind::SelfRag,
            "rat" => StrategyKind::Rat,
            _ => return Err(EngineError::Config(format!("unknown strategy {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducerKind {
    Pca,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaptorConfig {
    pub chunk_tokens: usize,
    pub max_depth: usize,
    pub responsibility_threshold: f64,
    pub max_clusters: usize,
    pub reducer: ReducerKind,
    pub components: usize,
}

impl Default for RaptorConfig {
    fn default() -> Self {
        Self {
            chunk_tokens: 100,
            max_depth: 3,
            responsibility_threshold: 0.1,
            max_clusters: 8,
            reducer: ReducerKind::Pca,
            components: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    /// Retrieval depth.
    pub k: usize,
    pub max_context_tokens: usize,
    /// Temperature for every generation other than Fusion reformulation.
    pub temperature: f64,
    pub rat_iterations: usize,
    pub fusion_queries: usize,
    pub fusion_smoothing_k: usize,
    pub fusion_temperature: f64,
    /// Relevance, support and utility weights.
    pub selfrag_weights: [f64; 3],
    pub selfrag_passages: usize,
    pub selfrag_top: usize,
    pub raptor: RaptorConfig,
    pub scoring: ScoreOptions,
    pub seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            k: 10,
            max_context_tokens: 4000,
            temperature: 0.1,
            rat_iterations: 3,
            fusion_queries: 4,
            fusion_smoothing_k: 60,
            fusion_temperature: 0.9,
            selfrag_weights: [1.0 / 3.0; 3],
            selfrag_passages: 5,
            selfrag_top: 3,
            raptor: RaptorConfig::default(),
            scoring: ScoreOptions::default(),
            seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.rat_iterations == 0 {
            return bad("rat_iterations must be at least 1");
        }
        if self.fusion_queries == 0 {
            return bad("fusion_queries must be at least 1");
        }
        if self.max_context_tokens == 0 {
            return bad("max_context_tokens must be positive");
        }
        if self.selfrag_passages == 0 || self.selfrag_top == 0 {
            return bad("self-rag passage counts must be positive");
        }
        let w = self.selfrag_weights;
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("selfrag_weights must be non-negative and sum to 1");
        }
        for t in [self.temperature, self.fusion_temperature, self.scoring.temperature] {
            if !(0.0..=2.0).contains(&t) {
                return bad("temperatures must lie in [0, 2]");
            }
        }
        let r = &self.raptor;
        if r.chunk_tokens == 0 || r.max_clusters == 0 || r.components == 0 {
            return bad("raptor sizes must be positive");
        }
        if !(0.0..=1.0).contains(&r.responsibility_threshold) {
            return bad("raptor responsibility_threshold must lie in [0, 1]");
        }
        Ok(())
    }
}
