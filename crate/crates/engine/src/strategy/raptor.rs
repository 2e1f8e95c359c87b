//! Recursive cluster-and-summarize tree over corpus chunks, queried as a
//! collapsed (flattened) node set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use uragc_core::mixture::{select_by_bic, CovarianceKind, IdentityReducer, MixtureOptions, Pca, Reducer};
use uragc_core::retrieval::dot;
use uragc_core::{stable_argmax, Document};
use uragc_providers::{embed, ChatRequest, Providers};

use super::config::{RaptorConfig, ReducerKind};
use super::env::EMBED_BATCH;
use crate::context::CHARS_PER_TOKEN;
use crate::error::{ProviderContext, Result};
use crate::prompts::PromptSet;
use crate::util::derive_seed;

pub const FLAG_SUMMARY_FALLBACK: &str = "raptor_summary_fallback";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaptorNode {
    pub id: String,
    pub text: String,
    pub vector: Vec<f64>,
    pub children: Vec<String>,
    /// 0 for leaves.
    pub depth: usize,
    /// Document a leaf was cut from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaptorTree {
    pub corpus_ref: String,
    pub nodes: Vec<RaptorNode>,
    /// Node indices per depth; `layers[0]` are the leaves.
    pub layers: Vec<Vec<usize>>,
    /// Component count BIC chose at each clustered layer.
    pub selected_k: Vec<usize>,
    pub reducer: String,
    pub flags: BTreeSet<String>,
}

impl RaptorTree {
    pub fn node(&self, id: &str) -> Option<&RaptorNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// All nodes by descending similarity to `query`, ties by id.
    pub fn rank(&self, query: &[f64]) -> Vec<(f64, &RaptorNode)> {
        let mut scored: Vec<(f64, &RaptorNode)> = self.nodes.iter().map(|n| (dot(&n.vector, query), n)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        scored
    }
}

/// Splits on whitespace into chunks of at most `chunk_tokens` estimated
/// tokens; words longer than a chunk are cut.
pub fn chunk_text(text: &str, chunk_tokens: usize) -> Vec<String> {
    let budget = (chunk_tokens * CHARS_PER_TOKEN).max(1);
    let mut chunks = Vec::new();
    let mut cur = String::new();
    let mut cur_len = 0;
    for word in text.split_whitespace() {
        let mut word: Vec<char> = word.chars().collect();
        while word.len() > budget {
            if !cur.is_empty() {
                chunks.push(std::mem::take(&mut cur));
                cur_len = 0;
            }
            chunks.push(word.drain(..budget).collect());
        }
        if word.is_empty() {
            continue;
        }
        let extra = word.len() + usize::from(!cur.is_empty());
        if cur_len + extra > budget {
            chunks.push(std::mem::take(&mut cur));
            cur_len = 0;
        }
        if !cur.is_empty() {
            cur.push(' ');
            cur_len += 1;
        }
        cur.extend(word.iter());
        cur_len += word.len();
    }
    if !cur.is_empty() {
        chunks.push(cur);
    }
    chunks
}

/// Membership lists: every point joins its most responsible component
/// and any other with responsibility at least `threshold`. Empty
/// components are dropped.
pub fn soft_assign(resp: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let k = resp.first().map_or(0, Vec::len);
    let mut clusters = vec![Vec::new(); k];
    for (i, r) in resp.iter().enumerate() {
        let best = stable_argmax(r).expect("at least one component");
        for (c, &v) in r.iter().enumerate() {
            if c == best || v >= threshold {
                clusters[c].push(i);
            }
        }
    }
    clusters.retain(|c| !c.is_empty());
    clusters
}

fn embed_all(providers: &Providers, texts: &[String], what: &str) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(EMBED_BATCH) {
        out.extend(embed(providers.embed.as_ref(), batch).context(|| format!("embedding {what}"))?);
    }
    Ok(out)
}

pub fn build_raptor_tree(
    corpus_ref: &str,
    docs: &[Document],
    cfg: &RaptorConfig,
    seed: u64,
    temperature: f64,
    providers: &Providers,
    prompts: &PromptSet,
) -> Result<RaptorTree> {
    let mut nodes = Vec::new();
    for d in docs {
        for (i, chunk) in chunk_text(&d.render(), cfg.chunk_tokens).into_iter().enumerate() {
            nodes.push(RaptorNode {
                id: format!("{}#{i}", d.id),
                text: chunk,
                vector: Vec::new(),
                children: Vec::new(),
                depth: 0,
                source: Some(d.id.clone()),
            });
        }
    }
    let texts: Vec<String> = nodes.iter().map(|n| n.text.clone()).collect();
    if texts.is_empty() {
        return Err(crate::error::EngineError::Strategy(format!("corpus {corpus_ref} has no text to chunk")));
    }
    for (n, v) in nodes.iter_mut().zip(embed_all(providers, &texts, "RAPTOR leaves")?) {
        n.vector = v;
    }
    let reducer: Box<dyn Reducer<f64>> = match cfg.reducer {
        ReducerKind::Pca => Box::new(Pca {
            max_components: cfg.components,
            seed,
        }),
        ReducerKind::None => Box::new(IdentityReducer),
    };
    let mut tree = RaptorTree {
        corpus_ref: corpus_ref.to_string(),
        layers: vec![(0..nodes.len()).collect()],
        nodes,
        selected_k: Vec::new(),
        reducer: reducer.name(),
        flags: BTreeSet::new(),
    };
    for depth in 1..=cfg.max_depth {
        let current = tree.layers.last().expect("leaf layer").clone();
        if current.len() <= 2 {
            break;
        }
        let data: Vec<Vec<f64>> = current.iter().map(|&i| tree.nodes[i].vector.clone()).collect();
        let reduced = reducer.reduce(&data);
        let opts = MixtureOptions {
            seed: derive_seed(seed, &[corpus_ref, "raptor", &depth.to_string()]),
            ..MixtureOptions::default()
        };
        let k_max = cfg.max_clusters.min(current.len() - 1).max(1);
        let selection = select_by_bic(&reduced, k_max, CovarianceKind::Full, &opts)?;
        let resp = selection.best.model.responsibilities(&reduced);
        let clusters = soft_assign(&resp, cfg.responsibility_threshold);
        if clusters.len() >= current.len() {
            break;
        }
        tree.selected_k.push(selection.k());
        let mut summaries = Vec::with_capacity(clusters.len());
        for members in &clusters {
            let joined = members
                .iter()
                .map(|&m| tree.nodes[current[m]].text.as_str())
                .collect::<Vec<_>>()
                .join("\n\n");
            let prompt = prompts.fill("raptor_summary", &[("passages", &joined)]);
            let request = ChatRequest::user(prompt).temperature(temperature).max_tokens(256);
            let summary = match providers.chat.chat(&request) {
                Ok(r) if !r.text.trim().is_empty() => r.text.trim().to_string(),
                other => {
                    if let Err(e) = other {
                        log::warn!("RAPTOR summary failed, concatenating: {e}");
                    }
                    tree.flags.insert(FLAG_SUMMARY_FALLBACK.to_string());
                    joined
                }
            };
            summaries.push(summary);
        }
        let vectors = embed_all(providers, &summaries, "RAPTOR summaries")?;
        let mut layer = Vec::with_capacity(clusters.len());
        for (j, ((members, text), vector)) in clusters.iter().zip(summaries).zip(vectors).enumerate() {
            layer.push(tree.nodes.len());
            tree.nodes.push(RaptorNode {
                id: format!("L{depth}:{j}"),
                text,
                vector,
                children: members.iter().map(|&m| tree.nodes[current[m]].id.clone()).collect(),
                depth,
                source: None,
            });
        }
        tree.layers.push(layer);
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_respect_budget() {
        let text = "alpha beta gamma delta epsilon zeta";
        let chunks = chunk_text(text, 3);
        assert!(chunks.iter().all(|c| c.chars().count() <= 12));
        assert_eq!(chunks.join(" "), text);
        let long = chunk_text(&"x".repeat(30), 2);
        assert_eq!(long, ["x".repeat(8), "x".repeat(8), "x".repeat(8), "x".repeat(6)]);
        assert!(chunk_text("   ", 10).is_empty());
    }

    #[test]
    fn soft_assignment_always_keeps_argmax() {
        let resp = vec![vec![0.95, 0.05, 0.0], vec![0.6, 0.4, 0.0], vec![0.2, 0.8, 0.0]];
        let clusters = soft_assign(&resp, 0.3);
        assert_eq!(clusters, vec![vec![0, 1], vec![1, 2]]);
        let strict = soft_assign(&resp, 1.0);
        assert_eq!(strict, vec![vec![0, 1], vec![2]]);
    }
}
