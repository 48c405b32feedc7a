//! Dense vector index over the retrieval corpus with exact top-k search.
//!
//! Persisted layout (one directory):
//!
//! ```text
//! manifest.json   metric, dimension, backend id, corpus fingerprint, count
//! vectors.f32     little-endian f32, row-major, count x dimension
//! ids.txt         one article id per line, row order
//! ```

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, EmbeddingBackend};
use crate::corpus::CorpusStore;
use crate::exec::Exec;

pub const MANIFEST: &str = "manifest.json";
pub const VECTORS: &str = "vectors.f32";
pub const IDS: &str = "ids.txt";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("retrieval corpus is empty after seed exclusion")]
    EmptyCorpus,
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("embedding failed for article {id:?}: {source}")]
    Embedding { id: String, source: BackendError },
    #[error("query embedding failed: {0}")]
    QueryEmbedding(BackendError),
    #[error("vector for {id:?} has dimension {got}, expected {expected}")]
    Dimension { id: String, expected: usize, got: usize },
    #[error("corpus fingerprint mismatch: index built for {index}, store is {store}")]
    FingerprintMismatch { index: String, store: String },
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Metric {
    #[default]
    InnerProduct,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPassage {
    pub article_id: String,
    pub text: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub metric: Metric,
    pub dimension: usize,
    pub backend: String,
    pub corpus_fingerprint: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    manifest: IndexManifest,
    ids: Vec<String>,
    /// Row-major, `ids.len() * dimension`. Cosine indexes store unit rows.
    vectors: Vec<f32>,
}

fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Descending score, then ascending id.
fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Embeds every retrieval article (seeds excluded) with the passage encoder.
pub fn build_index(store: &CorpusStore, backend: &dyn EmbeddingBackend, metric: Metric) -> Result<VectorIndex, RetrievalError> {
    build_index_with(store, backend, metric, Exec::default())
}

pub fn build_index_with(
    store: &CorpusStore,
    backend: &dyn EmbeddingBackend,
    metric: Metric,
    exec: Exec,
) -> Result<VectorIndex, RetrievalError> {
    let articles: Vec<_> = store.retrieval_articles().collect();
    if articles.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let dimension = backend.dimension();
    let embedded = exec.map(&articles, |a| backend.embed_passage(&a.content));
    let mut vectors = Vec::with_capacity(articles.len() * dimension);
    let mut ids = Vec::with_capacity(articles.len());
    for (a, v) in articles.iter().zip(embedded) {
        let mut v = v.map_err(|source| RetrievalError::Embedding { id: a.id.clone(), source })?;
        if v.len() != dimension {
            return Err(RetrievalError::Dimension { id: a.id.clone(), expected: dimension, got: v.len() });
        }
        if metric == Metric::Cosine {
            normalize(&mut v);
        }
        vectors.extend_from_slice(&v);
        ids.push(a.id.clone());
    }
    let manifest = IndexManifest {
        format_version: FORMAT_VERSION,
        metric,
        dimension,
        backend: backend.identifier(),
        corpus_fingerprint: store.fingerprint(),
        count: ids.len(),
    };
    Ok(VectorIndex { manifest, ids, vectors })
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        let d = self.manifest.dimension;
        &self.vectors[row * d..(row + 1) * d]
    }

    /// Exact top-k over all rows for an already-embedded query.
    pub fn search(&self, query: &[f32], k: usize, exec: Exec) -> Result<Vec<(String, f64)>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.len() != self.manifest.dimension {
            return Err(RetrievalError::Dimension {
                id: "<query>".into(),
                expected: self.manifest.dimension,
                got: query.len(),
            });
        }
        let mut q = query.to_vec();
        if self.manifest.metric == Metric::Cosine {
            normalize(&mut q);
        }
        let scores = exec.map_range(self.len(), |row| dot(self.vector(row), &q));
        let mut scored: Vec<(f64, &str)> = scores.into_iter().zip(self.ids.iter().map(String::as_str)).collect();
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(scored.into_iter().map(|(s, id)| (id.to_string(), s)).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(MANIFEST);
        let mut manifest = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        manifest.push(b'\n');
        fs::write(&path, manifest).map_err(io_err(&path))?;
        let path = dir.join(VECTORS);
        let bytes: Vec<u8> = self.vectors.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(io_err(&path))?;
        let path = dir.join(IDS);
        let mut ids = String::new();
        for id in &self.ids {
            ids.push_str(id);
            ids.push('\n');
        }
        fs::write(&path, ids).map_err(io_err(&path))?;
        Ok(())
    }

    /// Loads an index and checks it was built from `store`'s retrieval set.
    pub fn load(dir: &Path, store: &CorpusStore) -> Result<Self, RetrievalError> {
        let index = VectorIndex::load_unchecked(dir)?;
        let fp = store.fingerprint();
        if index.manifest.corpus_fingerprint != fp {
            return Err(RetrievalError::FingerprintMismatch { index: index.manifest.corpus_fingerprint, store: fp });
        }
        Ok(index)
    }

    pub fn load_unchecked(dir: &Path) -> Result<Self, RetrievalError> {
        let path = dir.join(MANIFEST);
        let manifest: IndexManifest = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)
            .map_err(|e| RetrievalError::Corrupt(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(RetrievalError::Corrupt(format!("unsupported format version {}", manifest.format_version)));
        }
        let path = dir.join(IDS);
        let ids: Vec<String> = fs::read_to_string(&path).map_err(io_err(&path))?.lines().map(str::to_string).collect();
        let path = dir.join(VECTORS);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() % 4 != 0 {
            return Err(RetrievalError::Corrupt("vector file length not a multiple of 4".into()));
        }
        let vectors: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if ids.len() != manifest.count || vectors.len() != manifest.count * manifest.dimension {
            return Err(RetrievalError::Corrupt(format!(
                "manifest says {} x {}, found {} ids and {} floats",
                manifest.count,
                manifest.dimension,
                ids.len(),
                vectors.len()
            )));
        }
        Ok(VectorIndex { manifest, ids, vectors })
    }
}

/// Index plus the store it was built from, so hits can carry their text.
pub struct Retriever<'a> {
    pub index: &'a VectorIndex,
    pub store: &'a CorpusStore,
    pub backend: &'a dyn EmbeddingBackend,
    /// Passages are cut to this many words; 0 keeps the full article.
    pub max_passage_words: usize,
    pub exec: Exec,
}

impl Retriever<'_> {
    pub fn query(&self, article_text: &str, k: usize) -> Result<Vec<RetrievedPassage>, RetrievalError> {
        query(self.index, self.backend, self.store, article_text, k, self.max_passage_words, self.exec)
    }
}

/// Embeds `article_text` with the question encoder and returns the exact
/// top-k passages, ties broken by smaller id.
pub fn query(
    index: &VectorIndex,
    backend: &dyn EmbeddingBackend,
    store: &CorpusStore,
    article_text: &str,
    k: usize,
    max_passage_words: usize,
    exec: Exec,
) -> Result<Vec<RetrievedPassage>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let q = backend.embed_query(article_text).map_err(RetrievalError::QueryEmbedding)?;
    let hits = index.search(&q, k, exec)?;
    hits.into_iter()
        .enumerate()
        .map(|(i, (id, score))| {
            let article = store
                .get(&id)
                .ok_or_else(|| RetrievalError::Corrupt(format!("indexed id {id:?} missing from store")))?;
            let text = if max_passage_words == 0 {
                article.content.clone()
            } else {
                crate::text::truncate_words(&article.content, max_passage_words)
            };
            Ok(RetrievedPassage { article_id: id, text, score, rank: i + 1 })
        })
        .collect()
}
