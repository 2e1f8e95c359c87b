//! Exact cosine search, reciprocal-rank fusion and irrelevant-document
//! sampling over an in-memory corpus index.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, integrity, CoreError, Result};
use crate::model::Document;
use crate::scalar::Real;

pub const DEFAULT_RRF_K: usize = 60;

/// Unit vectors for every document of one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex<T = f64> {
    corpus_ref: String,
    ids: Vec<String>,
    vectors: Vec<Vec<T>>,
    dimension: usize,
}

fn l2_normalize<T: Real>(v: &mut [T]) -> Result<()> {
    let norm = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(argument("cannot normalize a zero or non-finite vector"));
    }
    v.iter_mut().for_each(|x| *x = *x / norm);
    Ok(())
}

impl<T: Real> VectorIndex<T> {
    /// Builds from precomputed vectors, normalizing each one.
    pub fn from_vectors(
        corpus_ref: impl Into<String>,
        entries: impl IntoIterator<Item = (String, Vec<T>)>,
    ) -> Result<Self> {
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        let mut seen = HashSet::new();
        let mut dimension = None;
        for (id, mut v) in entries {
            if !seen.insert(id.clone()) {
                return Err(integrity(format!("duplicate document id {id:?}")));
            }
            match dimension {
                None => dimension = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(integrity(format!(
                        "document {id:?} has dimension {}, index uses {d}",
                        v.len()
                    )))
                }
                _ => {}
            }
            l2_normalize(&mut v)?;
            ids.push(id);
            vectors.push(v);
        }
        let dimension = dimension.ok_or_else(|| argument("index needs at least one document"))?;
        if dimension == 0 {
            return Err(argument("zero-dimensional vectors"));
        }
        Ok(Self {
            corpus_ref: corpus_ref.into(),
            ids,
            vectors,
            dimension,
        })
    }

    pub fn corpus_ref(&self) -> &str {
        &self.corpus_ref
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, id: &str) -> Option<&[T]> {
        self.ids
            .iter()
            .position(|x| x == id)
            .map(|i| self.vectors[i].as_slice())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.vectors.iter().map(Vec::as_slice))
    }
}

/// Embeds `docs` in batches and builds the index.
///
/// `embed` receives document texts and must return one vector per text.
pub fn build_index<T, F, E>(
    corpus_ref: &str,
    docs: &[Document],
    batch_size: usize,
    mut embed: F,
) -> Result<VectorIndex<T>>
where
    T: Real,
    F: FnMut(&[String]) -> std::result::Result<Vec<Vec<T>>, E>,
    E: std::fmt::Display,
{
    if docs.is_empty() {
        return Err(argument("corpus is empty"));
    }
    let mut seen = HashSet::new();
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(integrity(format!("duplicate document id {:?}", d.id)));
        }
    }
    let mut entries = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(batch_size.max(1)) {
        let texts: Vec<String> = chunk.iter().map(Document::render).collect();
        let vecs = embed(&texts).map_err(|e| CoreError::Embedding {
            doc_ids: chunk.iter().map(|d| d.id.as_str()).collect::<Vec<_>>().join(","),
            message: e.to_string(),
        })?;
        if vecs.len() != chunk.len() {
            return Err(CoreError::Embedding {
                doc_ids: chunk[0].id.clone(),
                message: format!("expected {} vectors, got {}", chunk.len(), vecs.len()),
            });
        }
        entries.extend(chunk.iter().map(|d| d.id.clone()).zip(vecs));
    }
    VectorIndex::from_vectors(corpus_ref, entries)
}

/// Ordered document ids (rank 0 = best) with their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking<T = f64> {
    pub query: String,
    pub ids: Vec<String>,
    pub scores: Vec<T>,
}

impl<T> Ranking<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn by_score_then_id<T: PartialOrd>(a: &(T, &str), b: &(T, &str)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Top-`min(k, n)` documents by dot product with a unit query.
///
/// Ties are broken by ascending document id.
pub fn search<T: Real>(
    index: &VectorIndex<T>,
    query: &[T],
    k: usize,
    query_text: &str,
) -> Result<Ranking<T>> {
    if k == 0 {
        return Err(argument("k must be at least 1"));
    }
    if query.len() != index.dimension {
        return Err(argument(format!(
            "query dimension {} does not match index dimension {}",
            query.len(),
            index.dimension
        )));
    }
    let mut scored: Vec<(T, &str)> = index
        .entries()
        .map(|(id, v)| (dot(v, query), id))
        .collect();
    scored.sort_by(by_score_then_id);
    scored.truncate(k);
    Ok(Ranking {
        query: query_text.to_string(),
        ids: scored.iter().map(|(_, id)| id.to_string()).collect(),
        scores: scored.iter().map(|(s, _)| *s).collect(),
    })
}

/// Reciprocal-rank fusion: each document scores `Σ 1/(k + r + 1)` over the
/// rankings that contain it, with 0-based rank `r`.
///
/// Per-document terms are summed in ascending rank order, so the result is
/// bitwise independent of the order of `rankings`.
pub fn rrf_fuse<T: Real, S>(rankings: &[Ranking<S>], smoothing_k: usize) -> Result<Ranking<T>> {
    if rankings.is_empty() {
        return Err(argument("no rankings to fuse"));
    }
    let mut ranks: HashMap<&str, Vec<usize>> = HashMap::new();
    for ranking in rankings {
        let mut seen = HashSet::new();
        for (r, id) in ranking.ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(integrity(format!("document {id:?} repeated within one ranking")));
            }
            ranks.entry(id.as_str()).or_default().push(r);
        }
    }
    let mut scored: Vec<(T, &str)> = ranks
        .into_iter()
        .map(|(id, mut rs)| {
            rs.sort_unstable();
            let s = rs.into_iter().fold(T::zero(), |acc, r| {
                acc + T::one() / T::from_count(smoothing_k + r + 1)
            });
            (s, id)
        })
        .collect();
    scored.sort_by(by_score_then_id);
    let query = rankings
        .iter()
        .map(|r| r.query.as_str())
        .collect::<Vec<_>>()
        .join(" | ");
    Ok(Ranking {
        query,
        ids: scored.iter().map(|(_, id)| id.to_string()).collect(),
        scores: scored.iter().map(|(s, _)| *s).collect(),
    })
}

/// Seeded uniform sample without replacement from the ids not in `exclude`.
pub fn sample_irrelevant<T>(
    index: &VectorIndex<T>,
    exclude: &BTreeSet<String>,
    count: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let pool: Vec<&String> = index.ids.iter().filter(|id| !exclude.contains(*id)).collect();
    if count > pool.len() {
        return Err(argument(format!(
            "need {count} irrelevant documents but only {} are available (short by {})",
            pool.len(),
            count - pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

const CACHE_MAGIC: &[u8; 4] = b"UGIX";
const CACHE_VERSION: u32 = 1;

/// Writes `id → vector` pairs as little-endian `f32`.
///
/// Layout: magic, version, dimension, count (all `u32`), then per entry the
/// id length, id bytes, and `dimension` floats.
pub fn write_index_cache<T: Real>(index: &VectorIndex<T>, mut out: impl Write) -> Result<()> {
    out.write_all(CACHE_MAGIC)?;
    for v in [CACHE_VERSION, index.dimension as u32, index.len() as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for (id, vec) in index.entries() {
        out.write_all(&(id.len() as u32).to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        for x in vec {
            let f = x.to_f32().ok_or_else(|| argument("vector entry not representable"))?;
            out.write_all(&f.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_index_cache<T: Real>(corpus_ref: &str, mut input: impl Read) -> Result<VectorIndex<T>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(integrity("not an index cache file"));
    }
    let version = read_u32(&mut input)?;
    if version != CACHE_VERSION {
        return Err(integrity(format!("unsupported index cache version {version}")));
    }
    let dimension = read_u32(&mut input)? as usize;
    let count = read_u32(&mut input)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut id = vec![0u8; len];
        input.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| integrity(e.to_string()))?;
        let mut v = Vec::with_capacity(dimension);
        for _ in 0..dimension {
            let mut buf = [0u8; 4];
            input.read_exact(&mut buf)?;
            v.push(T::lit(f64::from(f32::from_le_bytes(buf))));
        }
        entries.push((id, v));
    }
    VectorIndex::from_vectors(corpus_ref, entries)
}
