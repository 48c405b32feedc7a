//! Corpus ingestion, contamination controls, and store persistence.
//!
//! A [`CorpusStore`] holds every article the pipeline knows about: the
//! retrieval corpus (`CORPUS_ONLY`), the seed articles the generator rewrites,
//! and the labeled evaluation split. Seed articles are excluded from the
//! retrieval enumeration so the detector can never look its own input up.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exec::Exec;
use crate::text::{content_words, normalize_whitespace};

pub const ARTICLES_FILE: &str = "articles.jsonl";
pub const MANIFEST_FILE: &str = "dedup_manifest.jsonl";
pub const SEEDS_FILE: &str = "seed_ids.txt";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate article id {id:?} (lines {first_line} and {second_line})")]
    DuplicateId { id: String, first_line: usize, second_line: usize },
    #[error("line {line}: EVAL article {id:?} has no label")]
    UnlabeledEval { line: usize, id: String },
    #[error("invalid dedup parameters: {0}")]
    InvalidParams(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Binary target: REAL = 1, FAKE = 0.
    pub fn as_target(self) -> f64 {
        match self {
            Label::Real => 1.0,
            Label::Fake => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Eval,
    #[default]
    CorpusOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub content: String,
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published_at: Option<NaiveDate>,
    pub label: Label,
    pub split: Split,
}

impl Article {
    pub fn new(id: impl Into<String>, content: impl Into<String>) -> Self {
        Article {
            id: id.into(),
            content: normalize_whitespace(&content.into()),
            source: String::new(),
            published_at: None,
            label: Label::Real,
            split: Split::CorpusOnly,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }
}

/// Record format accepted on input (JSONL objects or CSV rows).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: Option<String>,
    content: Option<String>,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    published_at: Option<String>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    split: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" | "json" => Some(InputFormat::Jsonl),
            "csv" => Some(InputFormat::Csv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupRecord {
    pub kept_id: String,
    pub removed_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStore {
    articles: BTreeMap<String, Article>,
    seed_ids: BTreeSet<String>,
    dedup_manifest: Vec<DedupRecord>,
}

/// Result of [`ingest`]: the store plus the number of skipped records.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub store: CorpusStore,
    pub skipped: usize,
}

fn parse_label(s: &str, line: usize) -> Result<Label, CorpusError> {
    match s.trim().to_ascii_uppercase().as_str() {
        "REAL" | "1" | "TRUE" => Ok(Label::Real),
        "FAKE" | "0" | "FALSE" => Ok(Label::Fake),
        other => Err(CorpusError::Malformed { line, message: format!("unknown label {other:?}") }),
    }
}

fn parse_split(s: &str, line: usize) -> Result<Split, CorpusError> {
    match s.trim().to_ascii_uppercase().as_str() {
        "TRAIN" => Ok(Split::Train),
        "EVAL" => Ok(Split::Eval),
        "CORPUS_ONLY" | "CORPUS" => Ok(Split::CorpusOnly),
        other => Err(CorpusError::Malformed { line, message: format!("unknown split {other:?}") }),
    }
}

fn non_empty(v: Option<String>) -> Option<String> {
    v.filter(|s| !s.trim().is_empty())
}

fn convert(raw: RawRecord, line: usize) -> Result<Option<Article>, CorpusError> {
    let id = non_empty(raw.id)
        .ok_or_else(|| CorpusError::Malformed { line, message: "missing id".into() })?
        .trim()
        .to_string();
    let content = normalize_whitespace(raw.content.as_deref().unwrap_or(""));
    if content.is_empty() {
        return Ok(None);
    }
    let split = non_empty(raw.split).map(|s| parse_split(&s, line)).transpose()?.unwrap_or_default();
    let label = non_empty(raw.label).map(|s| parse_label(&s, line)).transpose()?;
    let label = match (label, split) {
        (Some(l), _) => l,
        (None, Split::Eval) => return Err(CorpusError::UnlabeledEval { line, id }),
        (None, _) => Label::Real,
    };
    let published_at = non_empty(raw.published_at)
        .map(|s| {
            let day = s.trim().get(..10).unwrap_or(s.trim()).to_string();
            NaiveDate::parse_from_str(&day, "%Y-%m-%d")
                .map_err(|e| CorpusError::Malformed { line, message: format!("published_at {s:?}: {e}") })
        })
        .transpose()?;
    Ok(Some(Article {
        id,
        content,
        source: raw.source.unwrap_or_default().trim().to_string(),
        published_at,
        label,
        split,
    }))
}

/// Reads raw records into a store, normalizing whitespace.
///
/// Records with empty content are skipped and counted. Line numbers in errors
/// are 1-based physical lines (CSV: the header is line 1).
pub fn ingest<R: Read>(input: R, format: InputFormat) -> Result<Ingested, CorpusError> {
    let mut records: Vec<(usize, RawRecord)> = Vec::new();
    match format {
        InputFormat::Jsonl => {
            for (i, line) in BufReader::new(input).lines().enumerate() {
                let line_no = i + 1;
                let line = line.map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
                if line.trim().is_empty() {
                    continue;
                }
                let raw: RawRecord = serde_json::from_str(&line)
                    .map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
                records.push((line_no, raw));
            }
        }
        InputFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(input);
            for row in reader.deserialize::<RawRecord>() {
                let row = row.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    CorpusError::Malformed { line, message: e.to_string() }
                })?;
                // csv positions are not exposed on success; count physical rows
                records.push((records.len() + 2, row));
            }
        }
    }

    let mut store = CorpusStore::default();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    let mut skipped = 0;
    for (line, raw) in records {
        match convert(raw, line)? {
            None => skipped += 1,
            Some(article) => {
                if let Some(&first_line) = first_seen.get(&article.id) {
                    return Err(CorpusError::DuplicateId { id: article.id, first_line, second_line: line });
                }
                first_seen.insert(article.id.clone(), line);
                store.articles.insert(article.id.clone(), article);
            }
        }
    }
    Ok(Ingested { store, skipped })
}

/// Word shingles of size `k`. Texts shorter than `k` words yield a single
/// shingle of all their words so that short exact duplicates still match.
pub fn shingles(text: &str, k: usize) -> BTreeSet<String> {
    let words = content_words(text);
    if words.is_empty() {
        return BTreeSet::new();
    }
    if words.len() < k {
        return std::iter::once(words.join(" ")).collect();
    }
    words.windows(k).map(|w| w.join(" ")).collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

impl CorpusStore {
    pub fn from_articles(articles: impl IntoIterator<Item = Article>) -> Result<Self, CorpusError> {
        let mut store = CorpusStore::default();
        for (i, a) in articles.into_iter().enumerate() {
            if store.articles.contains_key(&a.id) {
                return Err(CorpusError::DuplicateId { id: a.id, first_line: 0, second_line: i + 1 });
            }
            store.articles.insert(a.id.clone(), a);
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Article> {
        self.articles.get(id)
    }

    /// All articles in id order, seeds included.
    pub fn articles(&self) -> impl Iterator<Item = &Article> {
        self.articles.values()
    }

    pub fn seed_ids(&self) -> &BTreeSet<String> {
        &self.seed_ids
    }

    pub fn dedup_manifest(&self) -> &[DedupRecord] {
        &self.dedup_manifest
    }

    pub fn is_seed(&self, id: &str) -> bool {
        self.seed_ids.contains(id)
    }

    /// The retrieval corpus: `CORPUS_ONLY` articles that are not seeds, in id
    /// order. TRAIN and EVAL articles never enter the index.
    pub fn retrieval_articles(&self) -> impl Iterator<Item = &Article> {
        self.articles.values().filter(|a| a.split == Split::CorpusOnly && !self.seed_ids.contains(&a.id))
    }

    /// Real articles available as generator seeds: every seed id present in
    /// the store plus every REAL TRAIN article, in id order.
    pub fn training_pool(&self) -> Vec<&Article> {
        self.articles
            .values()
            .filter(|a| self.seed_ids.contains(&a.id) || (a.split == Split::Train && a.label == Label::Real))
            .collect()
    }

    pub fn eval_articles(&self) -> Vec<&Article> {
        self.articles.values().filter(|a| a.split == Split::Eval).collect()
    }

    /// SHA-256 over the retrieval enumeration (ids and contents).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for a in self.retrieval_articles() {
            h.update(a.id.as_bytes());
            h.update([0u8]);
            h.update(a.content.as_bytes());
            h.update([0xffu8]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut articles = Vec::new();
        for a in self.articles.values() {
            serde_json::to_writer(&mut articles, a).expect("article serializes");
            articles.push(b'\n');
        }
        let mut manifest = Vec::new();
        for r in &self.dedup_manifest {
            serde_json::to_writer(&mut manifest, r).expect("record serializes");
            manifest.push(b'\n');
        }
        let mut seeds = String::new();
        for id in &self.seed_ids {
            seeds.push_str(id);
            seeds.push('\n');
        }
        for (name, bytes) in [(ARTICLES_FILE, articles), (MANIFEST_FILE, manifest), (SEEDS_FILE, seeds.into_bytes())] {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(io_err(&path))?;
            f.write_all(&bytes).map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let path = dir.join(ARTICLES_FILE);
        let mut store = CorpusStore::default();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let a: Article = serde_json::from_str(line)
                .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
            if store.articles.contains_key(&a.id) {
                return Err(CorpusError::DuplicateId { id: a.id, first_line: 0, second_line: i + 1 });
            }
            store.articles.insert(a.id.clone(), a);
        }
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let r: DedupRecord = serde_json::from_str(line)
                    .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
                store.dedup_manifest.push(r);
            }
        }
        let path = dir.join(SEEDS_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            store.seed_ids = read_id_list(&text);
        }
        Ok(store)
    }
}

/// One id per line; blank lines and `#` comments ignored.
pub fn read_id_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Marks `seed_ids` as excluded from retrieval. Returns the store and the
/// seed ids that were not found (those are logged, not fatal).
pub fn exclude_seeds(mut store: CorpusStore, seed_ids: &BTreeSet<String>) -> (CorpusStore, Vec<String>) {
    let mut unknown = Vec::new();
    for id in seed_ids {
        if !store.articles.contains_key(id) {
            log::warn!("seed id {id:?} not present in corpus");
            unknown.push(id.clone());
        }
        store.seed_ids.insert(id.clone());
    }
    (store, unknown)
}

/// Removes exact and near-duplicate articles from the retrieval corpus.
///
/// Candidates are the retrieval enumeration, visited in id order. A candidate
/// is removed when its `shingle_size` word-shingle Jaccard similarity with a
/// seed article or an already-kept candidate is at least `threshold`; the
/// earliest such match (seeds first, then smallest id) is recorded as the
/// survivor. Seeds, TRAIN and EVAL articles are never removed.
pub fn deduplicate(store: CorpusStore, shingle_size: usize, threshold: f64) -> Result<CorpusStore, CorpusError> {
    deduplicate_with(store, shingle_size, threshold, Exec::default())
}

pub fn deduplicate_with(
    mut store: CorpusStore,
    shingle_size: usize,
    threshold: f64,
    exec: Exec,
) -> Result<CorpusStore, CorpusError> {
    if shingle_size == 0 {
        return Err(CorpusError::InvalidParams("shingle_size must be >= 1".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CorpusError::InvalidParams(format!("threshold {threshold} not in (0, 1]")));
    }

    let seeds: Vec<&Article> = store.seed_ids.iter().filter_map(|id| store.articles.get(id)).collect();
    let candidates: Vec<&Article> = store.retrieval_articles().collect();
    let seed_sh = exec.map(&seeds, |a| shingles(&a.content, shingle_size));
    let cand_sh = exec.map(&candidates, |a| shingles(&a.content, shingle_size));

    // references: (id, shingle index into `pool`)
    let mut pool: Vec<&BTreeSet<String>> = seed_sh.iter().collect();
    let mut ref_ids: Vec<&str> = seeds.iter().map(|a| a.id.as_str()).collect();
    let mut postings: HashMap<&str, Vec<usize>> = HashMap::new();
    for (r, sh) in pool.iter().enumerate() {
        for s in sh.iter() {
            postings.entry(s.as_str()).or_default().push(r);
        }
    }

    let mut removed: Vec<DedupRecord> = Vec::new();
    for (cand, sh) in candidates.iter().zip(cand_sh.iter()) {
        let mut refs: BTreeSet<usize> = BTreeSet::new();
        for s in sh {
            if let Some(p) = postings.get(s.as_str()) {
                refs.extend(p.iter().copied());
            }
        }
        let refs: Vec<usize> = refs.into_iter().collect();
        let sims = exec.map(&refs, |&r| jaccard(sh, pool[r]));
        let hit = refs.iter().zip(sims).find(|(_, sim)| *sim >= threshold);
        match hit {
            Some((&r, similarity)) => removed.push(DedupRecord {
                kept_id: ref_ids[r].to_string(),
                removed_id: cand.id.clone(),
                similarity,
            }),
            None => {
                let r = pool.len();
                pool.push(sh);
                ref_ids.push(&cand.id);
                for s in sh {
                    postings.entry(s.as_str()).or_default().push(r);
                }
            }
        }
    }

    for rec in &removed {
        store.articles.remove(&rec.removed_id);
    }
    store.dedup_manifest.extend(removed);
    Ok(store)
}
