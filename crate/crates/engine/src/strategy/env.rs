use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use uragc_core::retrieval::build_index;
use uragc_core::{Document, VectorIndex};
use uragc_providers::{embed, EmbeddingProvider, Providers};

use super::config::StrategyConfig;
use super::raptor::{build_raptor_tree, RaptorTree};
use crate::error::{EngineError, Result};
use crate::prompts::PromptSet;
use crate::util::json_hash;

pub const EMBED_BATCH: usize = 64;

/// A corpus with its vector index and any RAPTOR trees built over it.
#[derive(Debug)]
pub struct CorpusBundle {
    pub corpus_ref: String,
    pub docs: BTreeMap<String, Document>,
    pub index: VectorIndex,
    trees: Mutex<BTreeMap<String, Arc<RaptorTree>>>,
}

impl CorpusBundle {
    /// Embeds every document (or reuses stored embeddings when all
    /// documents carry one) and builds the index.
    pub fn build(corpus_ref: &str, docs: Vec<Document>, embedder: &dyn EmbeddingProvider) -> Result<Self> {
        for d in &docs {
            d.validate()?;
        }
        let index = if !docs.is_empty() && docs.iter().all(|d| d.embedding.is_some()) {
            let entries = docs
                .iter()
                .map(|d| (d.id.clone(), d.embedding.clone().expect("checked above")))
                .collect::<Vec<(String, Vec<f64>)>>();
            VectorIndex::from_vectors(corpus_ref, entries)?
        } else {
            build_index(corpus_ref, &docs, EMBED_BATCH, |texts| embed(embedder, texts))?
        };
        Self::from_index(docs, index)
    }

    /// Pairs documents with a prebuilt (e.g. cached) index.
    pub fn from_index(docs: Vec<Document>, index: VectorIndex) -> Result<Self> {
        let mut map = BTreeMap::new();
        for d in docs {
            let id = d.id.clone();
            if map.insert(id.clone(), d).is_some() {
                return Err(EngineError::Config(format!("duplicate document id {id:?}")));
            }
        }
        if map.len() != index.len() || index.ids().iter().any(|id| !map.contains_key(id)) {
            return Err(EngineError::Config(format!(
                "index for {} does not match its corpus",
                index.corpus_ref()
            )));
        }
        Ok(Self {
            corpus_ref: index.corpus_ref().to_string(),
            docs: map,
            index,
            trees: Mutex::default(),
        })
    }

    pub fn text(&self, id: &str) -> Option<String> {
        self.docs.get(id).map(Document::render)
    }

    /// The RAPTOR tree for `cfg`, built on first use.
    pub fn raptor_tree(&self, providers: &Providers, prompts: &PromptSet, cfg: &StrategyConfig) -> Result<Arc<RaptorTree>> {
        let key = json_hash(&(&cfg.raptor, cfg.seed, cfg.temperature));
        let mut trees = self.trees.lock().expect("tree cache lock");
        if let Some(t) = trees.get(&key) {
            return Ok(t.clone());
        }
        let docs: Vec<Document> = self.docs.values().cloned().collect();
        let tree = Arc::new(build_raptor_tree(
            &self.corpus_ref,
            &docs,
            &cfg.raptor,
            cfg.seed,
            cfg.temperature,
            providers,
            prompts,
        )?);
        trees.insert(key, tree.clone());
        Ok(tree)
    }
}

/// Everything a strategy run reads: providers, prompts and corpora.
#[derive(Clone)]
pub struct Env {
    pub providers: Providers,
    pub prompts: PromptSet,
    corpora: BTreeMap<String, Arc<CorpusBundle>>,
}

impl Env {
    pub fn new(providers: Providers) -> Self {
        Self {
            providers,
            prompts: PromptSet::default(),
            corpora: BTreeMap::new(),
        }
    }

    pub fn with_prompts(mut self, prompts: PromptSet) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn add_corpus(&mut self, bundle: CorpusBundle) -> Arc<CorpusBundle> {
        let b = Arc::new(bundle);
        self.corpora.insert(b.corpus_ref.clone(), b.clone());
        b
    }

    pub fn corpus(&self, corpus_ref: &str) -> Result<&Arc<CorpusBundle>> {
        self.corpora
            .get(corpus_ref)
            .ok_or_else(|| EngineError::Strategy(format!("no corpus loaded for {corpus_ref:?}")))
    }

    pub fn corpora(&self) -> impl Iterator<Item = &Arc<CorpusBundle>> {
        self.corpora.values()
    }
}
