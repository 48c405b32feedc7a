//! The round-based co-training loop.
//!
//! Every round the generator rewrites each article of a fixed seed set, the
//! detector scores the rewrites and critiques them, rewrites that fool the
//! detector feed the exemplar cache, the detector trains on the round's real
//! and fake articles, and the generator is fine-tuned on its best rewrites.
//!
//! A run directory holds `config.json`, `rounds/<t>.jsonl`, `cache.json`,
//! `vaf_memory.json`, and `checkpoints/<t>/{detector,generator}`; a run can be
//! resumed from it.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, DecodeParams, DetectorBackend, EmbeddingBackend, GeneratorBackend, SftExample, SftParams};
use crate::corpus::{Article, CorpusStore, Label};
use crate::detector::{self, assemble_input, DetectorError, DetectorInput, TrainParams};
use crate::eval::{roc_auc, ScoredExample};
use crate::exec::Exec;
use crate::generator::{self, assemble_prompt, select_sft_examples, AdversarialRewrite, GeneratorError, SftOutcome};
use crate::retrieval::{self, RetrievalError, RetrievedPassage, VectorIndex};
use crate::text::fnv1a;
use crate::vaf::{classify_reasons, extract_salient_tokens, Exemplar, ReasonLexicons, Stopwords, VafReport};

pub const CONFIG_FILE: &str = "config.json";
pub const ROUNDS_DIR: &str = "rounds";
pub const CACHE_FILE: &str = "cache.json";
pub const MEMORY_FILE: &str = "vaf_memory.json";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("round {round}: detector failed: {source}")]
    Detector { round: usize, source: DetectorError },
    #[error("round {round}: generator failed: {source}")]
    Generator { round: usize, source: BackendError },
    #[error("round {round}: retrieval failed: {source}")]
    Retrieval { round: usize, source: RetrievalError },
    #[error("round {round}: checkpoint failed: {source}")]
    Checkpoint { round: usize, source: BackendError },
    #[error("round {round}: no rewrite survived generation")]
    NoFakes { round: usize },
    #[error("run directory {path} is locked by another writer")]
    Locked { path: PathBuf },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

impl LoopError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        LoopError::Io { path: path.to_path_buf(), message: e.to_string() }
    }

    /// True for failures raised by a model backend.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            LoopError::Detector { source: DetectorError::Backend { .. }, .. }
                | LoopError::Generator { .. }
                | LoopError::Checkpoint { .. }
        )
    }
}

/// Low-rank adapter settings, recorded for the generator backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { rank: 16, alpha: 32.0, dropout: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub rounds: usize,
    pub generator_retrieval: bool,
    pub detector_retrieval: bool,
    /// Retrieval depth for both sides.
    pub k: usize,
    pub tau_fool: f64,
    pub tau_sft: f64,
    /// The generator is fine-tuned on rounds divisible by this.
    pub update_every: usize,
    pub cache_capacity: usize,
    pub sft_top_m: usize,
    pub vaf_enabled: bool,
    pub fewshot_enabled: bool,
    pub seed: u64,
    /// Size of the seed set; `None` uses the whole training pool.
    pub n_articles: Option<usize>,
    pub detector_lr: f64,
    pub detector_batch_size: usize,
    pub generator_lr: f64,
    pub kl_weight: f64,
    pub clip_norm: f64,
    pub salient_top_k: usize,
    /// Retrieved passages are cut to this many words; 0 keeps them whole.
    pub max_passage_words: usize,
    pub adapter: AdapterConfig,
    pub decode: DecodeParams,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            rounds: 6,
            generator_retrieval: true,
            detector_retrieval: true,
            k: 3,
            tau_fool: 0.5,
            tau_sft: 0.6,
            update_every: 1,
            cache_capacity: 3,
            sft_top_m: 8,
            vaf_enabled: true,
            fewshot_enabled: true,
            seed: 42,
            n_articles: None,
            detector_lr: 5e-6,
            detector_batch_size: 2,
            generator_lr: 1e-4,
            kl_weight: 0.01,
            clip_norm: 1.0,
            salient_top_k: 5,
            max_passage_words: 0,
            adapter: AdapterConfig::default(),
            decode: DecodeParams::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        let fail = |m: String| Err(LoopError::Config(m));
        if self.rounds < 1 {
            return fail("rounds must be at least 1".into());
        }
        if self.update_every < 1 {
            return fail("update_every must be at least 1".into());
        }
        if self.k < 1 {
            return fail("k must be at least 1".into());
        }
        for (name, v) in [("tau_fool", self.tau_fool), ("tau_sft", self.tau_sft)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.tau_sft < self.tau_fool {
            return fail(format!("tau_sft ({}) must be >= tau_fool ({})", self.tau_sft, self.tau_fool));
        }
        if self.detector_batch_size < 1 {
            return fail("detector_batch_size must be at least 1".into());
        }
        if self.n_articles == Some(0) {
            return fail("n_articles must be positive".into());
        }
        for (name, v) in [
            ("detector_lr", self.detector_lr),
            ("generator_lr", self.generator_lr),
            ("kl_weight", self.kl_weight),
            ("clip_norm", self.clip_norm),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    fn uses_retrieval(&self) -> bool {
        self.generator_retrieval || self.detector_retrieval
    }
}

/// A successful rewrite kept for few-shot prompting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedExemplar {
    pub source_id: String,
    pub round: usize,
    pub text: String,
    pub prob_real: f64,
}

/// Keeps the last `capacity` insertions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarCache {
    capacity: usize,
    items: VecDeque<CachedExemplar>,
}

impl ExemplarCache {
    pub fn new(capacity: usize) -> Self {
        ExemplarCache { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, item: CachedExemplar) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn items(&self) -> impl Iterator<Item = &CachedExemplar> {
        self.items.iter()
    }

    pub fn exemplars(&self) -> Vec<Exemplar> {
        self.items.iter().map(|c| Exemplar { text: c.text.clone(), prob_real: c.prob_real }).collect()
    }
}

/// The latest report per seed article.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VafMemory {
    reports: BTreeMap<String, VafReport>,
}

impl VafMemory {
    /// The report produced in round `round - 1`, if any.
    pub fn previous(&self, id: &str, round: usize) -> Option<&VafReport> {
        self.reports.get(id).filter(|r| r.round + 1 == round)
    }

    pub fn insert(&mut self, id: String, report: VafReport) {
        self.reports.insert(id, report);
    }

    pub fn get(&self, id: &str) -> Option<&VafReport> {
        self.reports.get(id)
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }
}

/// Backend identities and opaque settings, copied into every round log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendRecord {
    pub embedding: Option<String>,
    pub detector: String,
    pub generator: String,
    pub model: Option<String>,
    pub settings: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticleRecord {
    pub source_id: String,
    pub user_prompt: String,
    pub fake: Option<String>,
    pub prob_real: Option<f64>,
    pub fooled: bool,
    pub success: bool,
    pub reasons: Vec<String>,
    pub length_ratio: Option<f64>,
    pub length_flag: bool,
    pub real_detector_input: Option<String>,
    pub fake_detector_input: Option<String>,
    pub vaf: Option<VafReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorUpdate {
    pub examples: Vec<String>,
    pub outcome: Option<SftOutcome>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub config: LoopConfig,
    pub backends: BackendRecord,
    pub n_articles: usize,
    pub n_fakes: usize,
    pub fooled: Vec<String>,
    pub successes: Vec<String>,
    /// `fooled / n_fakes`.
    pub fool_rate: f64,
    pub n_success: usize,
    /// Cache contents after the round, oldest first.
    pub cache: Vec<CachedExemplar>,
    pub detector_loss: f64,
    pub detector_examples: usize,
    pub generator: GeneratorUpdate,
    /// Headline ROC-AUC on the evaluation split, after this round's update.
    pub eval_auc: Option<f64>,
    pub eval_examples: usize,
    /// ROC-AUC over this round's real articles and rewrites, after the update.
    pub round_auc: Option<f64>,
    pub detector_checkpoint: Option<String>,
    pub generator_checkpoint: Option<String>,
    #[serde(skip)]
    pub articles: Vec<ArticleRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine {
    Round(Box<RoundLog>),
    Article(Box<ArticleRecord>),
}

pub fn round_path(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join(ROUNDS_DIR).join(format!("{round}.jsonl"))
}

fn failed_marker(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join(ROUNDS_DIR).join(format!("{round}.failed"))
}

pub fn write_round_log(run_dir: &Path, log: &RoundLog) -> Result<(), LoopError> {
    let path = round_path(run_dir, log.round);
    let dir = path.parent().expect("round path has a parent");
    fs::create_dir_all(dir).map_err(|e| LoopError::io(dir, e))?;
    let mut out = Vec::new();
    let lines = std::iter::once(LogLine::Round(Box::new(log.clone())))
        .chain(log.articles.iter().map(|a| LogLine::Article(Box::new(a.clone()))));
    for line in lines {
        serde_json::to_writer(&mut out, &line).map_err(|e| LoopError::io(&path, e))?;
        out.push(b'\n');
    }
    write_atomic(&path, &out)
}

pub fn read_round_log(run_dir: &Path, round: usize) -> Result<RoundLog, LoopError> {
    let path = round_path(run_dir, round);
    let file = File::open(&path).map_err(|e| LoopError::io(&path, e))?;
    let mut log: Option<RoundLog> = None;
    let mut articles = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LoopError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&line)
            .map_err(|e| LoopError::Corrupt { path: path.clone(), message: format!("line {}: {e}", i + 1) })?;
        match parsed {
            LogLine::Round(r) if log.is_none() => log = Some(*r),
            LogLine::Round(_) => {
                return Err(LoopError::Corrupt { path, message: "more than one round line".into() });
            }
            LogLine::Article(a) => articles.push(*a),
        }
    }
    let mut log = log.ok_or_else(|| LoopError::Corrupt { path: path.clone(), message: "no round line".into() })?;
    log.articles = articles;
    Ok(log)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), LoopError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| LoopError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LoopError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), LoopError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| LoopError::io(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, LoopError> {
    let bytes = fs::read(path).map_err(|e| LoopError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| LoopError::Corrupt { path: path.to_path_buf(), message: e.to_string() })
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, LoopError> {
        fs::create_dir_all(run_dir).map_err(|e| LoopError::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(LoopError::Locked { path: run_dir.to_path_buf() }),
            Err(e) => Err(LoopError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Retrieval resources; required when either side retrieves.
#[derive(Clone, Copy)]
pub struct RetrievalContext<'a> {
    pub index: &'a VectorIndex,
    pub embedder: &'a dyn EmbeddingBackend,
}

/// Everything a round reads but does not mutate.
#[derive(Clone)]
pub struct Environment<'a> {
    pub store: &'a CorpusStore,
    pub retrieval: Option<RetrievalContext<'a>>,
    pub stopwords: &'a Stopwords,
    pub lexicons: &'a ReasonLexicons,
    pub exec: Exec,
    /// When set, rounds, snapshots, and checkpoints are persisted here.
    pub run_dir: Option<&'a Path>,
    pub backends: BackendRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub config: LoopConfig,
    /// The fixed seed set, reused every round.
    pub seeds: Vec<String>,
    pub cache: ExemplarCache,
    pub memory: VafMemory,
    pub completed: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheSnapshot {
    round: usize,
    cache: ExemplarCache,
}

#[derive(Serialize, Deserialize)]
struct MemorySnapshot {
    round: usize,
    memory: VafMemory,
}

/// Samples `n` articles from the training pool, returned in id order.
pub fn sample_seeds(store: &CorpusStore, n: Option<usize>, seed: u64) -> Vec<String> {
    let pool: Vec<&Article> = store.training_pool();
    let mut ids: Vec<String> = match n {
        Some(n) if n < pool.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            pool.iter().map(|a| a.id.clone()).choose_multiple(&mut rng, n)
        }
        _ => pool.iter().map(|a| a.id.clone()).collect(),
    };
    ids.sort();
    ids
}

fn derive_seed(seed: u64, round: usize, tag: &str) -> u64 {
    fnv1a(format!("{seed}:{round}:{tag}").as_bytes())
}

impl LoopState {
    pub fn new(config: LoopConfig, env: &Environment<'_>) -> Result<Self, LoopError> {
        config.validate()?;
        if config.uses_retrieval() && env.retrieval.is_none() {
            return Err(LoopError::Config("retrieval is enabled but no index was provided".into()));
        }
        let seeds = sample_seeds(env.store, config.n_articles, config.seed);
        if seeds.is_empty() {
            return Err(LoopError::Config("the training pool is empty".into()));
        }
        if let Some(n) = config.n_articles.filter(|&n| n > seeds.len()) {
            log::warn!("n_articles = {n} exceeds the training pool; using all {} articles", seeds.len());
        }
        Ok(LoopState { cache: ExemplarCache::new(config.cache_capacity), config, seeds, memory: VafMemory::default(), completed: 0 })
    }

    /// Rebuilds the state after the last completed round in `run_dir` and
    /// loads that round's checkpoints into the backends.
    pub fn resume(
        config: LoopConfig,
        env: &Environment<'_>,
        run_dir: &Path,
        detector: &mut dyn DetectorBackend,
        generator: &mut dyn GeneratorBackend,
    ) -> Result<Self, LoopError> {
        let mut state = LoopState::new(config, env)?;
        let mut completed = 0;
        while round_path(run_dir, completed + 1).exists() {
            completed += 1;
        }
        if completed == 0 {
            return Ok(state);
        }
        let last = read_round_log(run_dir, completed)?;
        let logged_seeds: Vec<String> = last.articles.iter().map(|a| a.source_id.clone()).collect();
        if logged_seeds != state.seeds {
            return Err(LoopError::Corrupt {
                path: round_path(run_dir, completed),
                message: "logged seed articles differ from the configured seed set".into(),
            });
        }
        let cache: CacheSnapshot = read_json(&run_dir.join(CACHE_FILE))?;
        let memory: MemorySnapshot = read_json(&run_dir.join(MEMORY_FILE))?;
        if cache.round != completed || memory.round != completed {
            return Err(LoopError::Corrupt {
                path: run_dir.to_path_buf(),
                message: format!("snapshots are from rounds {}/{}, last logged round is {completed}", cache.round, memory.round),
            });
        }
        let ckpt = run_dir.join(CHECKPOINTS_DIR).join(completed.to_string());
        detector.load(&ckpt.join("detector")).map_err(|source| LoopError::Checkpoint { round: completed, source })?;
        generator.load(&ckpt.join("generator")).map_err(|source| LoopError::Checkpoint { round: completed, source })?;
        state.cache = cache.cache;
        state.memory = memory.memory;
        state.completed = completed;
        log::info!("resumed {} after round {completed}", run_dir.display());
        Ok(state)
    }
}

/// Per-article result of the generation and classification phase.
struct ArticleOutcome {
    record: ArticleRecord,
    pair: Option<(DetectorInput, DetectorInput)>,
    rewrite: Option<AdversarialRewrite>,
    base_prompt: String,
}

fn retrieve(env: &Environment<'_>, config: &LoopConfig, text: &str, round: usize) -> Result<Vec<RetrievedPassage>, LoopError> {
    let r = env.retrieval.expect("checked at state construction");
    retrieval::query(r.index, r.embedder, env.store, text, config.k, config.max_passage_words, Exec::Sequential)
        .map_err(|source| LoopError::Retrieval { round, source })
}

#[allow(clippy::too_many_arguments)]
fn process_article(
    state: &LoopState,
    env: &Environment<'_>,
    snapshot: &[Exemplar],
    detector: &dyn DetectorBackend,
    generator: &dyn GeneratorBackend,
    article: &Article,
    round: usize,
) -> Result<ArticleOutcome, LoopError> {
    let config = &state.config;
    let context_g = if config.generator_retrieval { retrieve(env, config, &article.content, round)? } else { Vec::new() };
    let context_d = if config.detector_retrieval { retrieve(env, config, &article.content, round)? } else { Vec::new() };

    let feedback = if config.vaf_enabled { state.memory.previous(&article.id, round) } else { None };
    let exemplars: &[Exemplar] = if config.fewshot_enabled { snapshot } else { &[] };
    let prompt = assemble_prompt(article, &context_g, feedback, exemplars, config.generator_retrieval);
    let base_prompt = assemble_prompt(article, &context_g, None, &[], config.generator_retrieval).user;

    let mut record = ArticleRecord {
        source_id: article.id.clone(),
        user_prompt: prompt.user.clone(),
        fake: None,
        prob_real: None,
        fooled: false,
        success: false,
        reasons: Vec::new(),
        length_ratio: None,
        length_flag: false,
        real_detector_input: None,
        fake_detector_input: None,
        vaf: None,
        error: None,
    };

    let decode = DecodeParams { seed: config.decode.seed ^ derive_seed(config.seed, round, &article.id), ..config.decode };
    let mut rewrite = match generator::rewrite(&prompt, article, round, generator, &decode) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("round {round}: skipping {:?}: {e}", article.id);
            record.error = Some(e.to_string());
            return Ok(ArticleOutcome { record, pair: None, rewrite: None, base_prompt });
        }
    };

    let detector_err = |source| LoopError::Detector { round, source };
    let fake_input = assemble_input(&rewrite.text, &context_d, config.detector_retrieval, detector).map_err(detector_err)?;
    let real_input = assemble_input(&article.content, &context_d, config.detector_retrieval, detector).map_err(detector_err)?;
    let detection = detector::classify(&fake_input, detector, &format!("rewrite of {}", article.id)).map_err(detector_err)?;

    let tokens = extract_salient_tokens(
        &detection.output.attention,
        &detection.tokens,
        config.salient_top_k,
        env.stopwords,
        Some(fake_input.article_span),
    );
    let reasons = classify_reasons(&fake_input.article, &detection.verdict, &tokens, env.lexicons);
    let report = VafReport::new(round, detection.verdict, tokens, reasons);

    let p = detection.verdict.prob_real;
    rewrite.prob_real = Some(p);
    record.fake = Some(rewrite.text.clone());
    record.prob_real = Some(p);
    record.fooled = p > config.tau_fool;
    record.success = p > config.tau_sft;
    record.reasons = report.reasons.iter().map(|r| r.code.code().to_string()).collect();
    record.length_ratio = Some(rewrite.length_ratio);
    record.length_flag = rewrite.length_flag;
    record.real_detector_input = Some(real_input.rendered.clone());
    record.fake_detector_input = Some(fake_input.rendered.clone());
    record.vaf = Some(report);
    Ok(ArticleOutcome { record, pair: Some((real_input, fake_input)), rewrite: Some(rewrite), base_prompt })
}

fn score_inputs(
    inputs: &[(String, Label, DetectorInput)],
    detector: &dyn DetectorBackend,
    exec: Exec,
    round: usize,
) -> Result<Vec<ScoredExample>, LoopError> {
    exec.map(inputs, |(id, label, input)| {
        detector::classify(input, detector, id)
            .map(|d| ScoredExample::new(id.clone(), (*label == Label::Real) as u8, d.verdict.prob_real))
            .map_err(|source| LoopError::Detector { round, source })
    })
    .into_iter()
    .collect()
}

fn evaluate(
    state: &LoopState,
    env: &Environment<'_>,
    detector: &dyn DetectorBackend,
    round: usize,
) -> Result<(Option<f64>, usize), LoopError> {
    let config = &state.config;
    let eval = env.store.eval_articles();
    if eval.is_empty() {
        return Ok((None, 0));
    }
    let inputs: Vec<Result<(String, Label, DetectorInput), LoopError>> = env.exec.map(&eval, |a| {
        let evidence = if config.detector_retrieval { retrieve(env, config, &a.content, round)? } else { Vec::new() };
        let input = assemble_input(&a.content, &evidence, config.detector_retrieval, detector)
            .map_err(|source| LoopError::Detector { round, source })?;
        Ok((a.id.clone(), a.label, input))
    });
    let inputs: Vec<_> = inputs.into_iter().collect::<Result<_, _>>()?;
    let scored = score_inputs(&inputs, detector, env.exec, round)?;
    match roc_auc(&scored) {
        Ok(auc) => Ok((Some(auc), scored.len())),
        Err(e) => {
            log::warn!("round {round}: eval AUC unavailable: {e}");
            Ok((None, scored.len()))
        }
    }
}

/// Executes round `round`, which must follow the last completed one.
///
/// On a backend abort the round is marked failed in the run directory and
/// the error returned; earlier round logs are untouched.
pub fn step_round(
    state: &mut LoopState,
    env: &Environment<'_>,
    detector: &mut dyn DetectorBackend,
    generator: &mut dyn GeneratorBackend,
    round: usize,
) -> Result<RoundLog, LoopError> {
    if round != state.completed + 1 {
        return Err(LoopError::Config(format!("round {round} requested after {} completed rounds", state.completed)));
    }
    match execute_round(state, env, detector, generator, round) {
        Ok(log) => Ok(log),
        Err(e) => {
            if let Some(dir) = env.run_dir {
                let marker = failed_marker(dir, round);
                if let Some(parent) = marker.parent() {
                    let _ = fs::create_dir_all(parent);
                }
                let _ = fs::write(&marker, format!("{e}\n"));
            }
            log::error!("round {round} failed: {e}");
            Err(e)
        }
    }
}

fn execute_round(
    state: &mut LoopState,
    env: &Environment<'_>,
    detector: &mut dyn DetectorBackend,
    generator: &mut dyn GeneratorBackend,
    round: usize,
) -> Result<RoundLog, LoopError> {
    let config = state.config.clone();
    let snapshot = state.cache.exemplars();
    let seeds: Vec<&Article> = state
        .seeds
        .iter()
        .map(|id| env.store.get(id).ok_or_else(|| LoopError::Config(format!("seed article {id:?} missing from store"))))
        .collect::<Result<_, _>>()?;

    let outcomes: Vec<Result<ArticleOutcome, LoopError>> = {
        let (st, det, gen): (&LoopState, &dyn DetectorBackend, &dyn GeneratorBackend) = (state, detector, generator);
        env.exec.map_bounded(&seeds, gen.max_concurrency(), |a| process_article(st, env, &snapshot, det, gen, a, round))
    };
    let outcomes: Vec<ArticleOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;

    let mut reals = Vec::new();
    let mut fakes = Vec::new();
    let mut fooled = Vec::new();
    let mut successes = Vec::new();
    let mut rewrites = Vec::new();
    let mut base_prompts = BTreeMap::new();
    for o in &outcomes {
        if let Some((real, fake)) = &o.pair {
            reals.push(real.clone());
            fakes.push(fake.clone());
        }
        if o.record.fooled {
            fooled.push(o.record.source_id.clone());
        }
        if o.record.success {
            successes.push(o.record.source_id.clone());
            let p = o.record.prob_real.expect("successes are scored");
            state.cache.push(CachedExemplar {
                source_id: o.record.source_id.clone(),
                round,
                text: o.record.fake.clone().expect("successes have text"),
                prob_real: p,
            });
        }
        if let Some(r) = &o.rewrite {
            rewrites.push(r.clone());
        }
        base_prompts.insert(o.record.source_id.clone(), o.base_prompt.clone());
    }
    for o in &outcomes {
        if let Some(report) = &o.record.vaf {
            state.memory.insert(o.record.source_id.clone(), report.clone());
        }
    }
    if fakes.is_empty() {
        return Err(LoopError::NoFakes { round });
    }

    let params = TrainParams {
        lr: config.detector_lr,
        batch_size: config.detector_batch_size,
        shuffle_seed: derive_seed(config.seed, round, "detector"),
    };
    let trained =
        detector::train_round(detector, &reals, &fakes, &params).map_err(|source| LoopError::Detector { round, source })?;

    let update = if successes.is_empty() {
        GeneratorUpdate { examples: Vec::new(), outcome: None, skipped: Some("no successful rewrites".into()) }
    } else if !round.is_multiple_of(config.update_every) {
        GeneratorUpdate {
            examples: Vec::new(),
            outcome: None,
            skipped: Some(format!("round {round} is not a multiple of {}", config.update_every)),
        }
    } else {
        let selected = select_sft_examples(&rewrites, config.tau_sft, config.sft_top_m);
        let system = crate::prompts::SYSTEM_PROMPT.to_string();
        let examples: Vec<SftExample> = selected
            .iter()
            .map(|r| SftExample { system: system.clone(), user: base_prompts[&r.source_id].clone(), target: r.text.clone() })
            .collect();
        let sft = SftParams { lr: config.generator_lr, kl_weight: config.kl_weight, clip_norm: config.clip_norm };
        let ids = selected.iter().map(|r| r.source_id.clone()).collect();
        match generator::sft_update(generator, &examples, &sft) {
            Ok(outcome) => GeneratorUpdate { examples: ids, outcome: Some(outcome), skipped: None },
            Err(GeneratorError::Backend(source)) => return Err(LoopError::Generator { round, source }),
            Err(e) => {
                log::warn!("round {round}: generator update aborted: {e}");
                GeneratorUpdate { examples: ids, outcome: None, skipped: Some(e.to_string()) }
            }
        }
    };

    let mut round_inputs: Vec<(String, Label, DetectorInput)> = Vec::with_capacity(reals.len() * 2);
    for (o, (real, fake)) in outcomes.iter().filter_map(|o| o.pair.as_ref().map(|p| (o, p))) {
        round_inputs.push((o.record.source_id.clone(), Label::Real, real.clone()));
        round_inputs.push((format!("{}#fake", o.record.source_id), Label::Fake, fake.clone()));
    }
    let round_auc = roc_auc(&score_inputs(&round_inputs, detector, env.exec, round)?).ok();
    let (eval_auc, eval_examples) = evaluate(state, env, detector, round)?;

    let (mut detector_checkpoint, mut generator_checkpoint) = (None, None);
    if let Some(dir) = env.run_dir {
        let rel = PathBuf::from(CHECKPOINTS_DIR).join(round.to_string());
        let ckpt = dir.join(&rel);
        detector.save(&ckpt.join("detector")).map_err(|source| LoopError::Checkpoint { round, source })?;
        generator.save(&ckpt.join("generator")).map_err(|source| LoopError::Checkpoint { round, source })?;
        detector_checkpoint = Some(rel.join("detector").display().to_string());
        generator_checkpoint = Some(rel.join("generator").display().to_string());
    }

    let n_fakes = fakes.len();
    let log = RoundLog {
        round,
        config: config.clone(),
        backends: env.backends.clone(),
        n_articles: seeds.len(),
        n_fakes,
        fool_rate: fooled.len() as f64 / n_fakes as f64,
        n_success: successes.len(),
        fooled,
        successes,
        cache: state.cache.items().cloned().collect(),
        detector_loss: trained.mean_loss,
        detector_examples: trained.examples,
        generator: update,
        eval_auc,
        eval_examples,
        round_auc,
        detector_checkpoint,
        generator_checkpoint,
        articles: outcomes.into_iter().map(|o| o.record).collect(),
    };

    if let Some(dir) = env.run_dir {
        write_json(&dir.join(CACHE_FILE), &CacheSnapshot { round, cache: state.cache.clone() })?;
        write_json(&dir.join(MEMORY_FILE), &MemorySnapshot { round, memory: state.memory.clone() })?;
        write_round_log(dir, &log)?;
        let _ = fs::remove_file(failed_marker(dir, round));
    }
    state.completed = round;
    log::info!(
        "round {round}: fool rate {:.3}, {} successes, detector loss {:.4}, eval AUC {}",
        log.fool_rate,
        log.n_success,
        log.detector_loss,
        log.eval_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(log)
}

/// Runs the remaining rounds up to `config.rounds`.
pub fn run_from(
    state: &mut LoopState,
    env: &Environment<'_>,
    detector: &mut dyn DetectorBackend,
    generator: &mut dyn GeneratorBackend,
) -> Result<Vec<RoundLog>, LoopError> {
    if let Some(dir) = env.run_dir {
        let path = dir.join(CONFIG_FILE);
        if !path.exists() {
            write_json(&path, &state.config)?;
        }
    }
    let mut logs = Vec::new();
    for t in state.completed + 1..=state.config.rounds {
        logs.push(step_round(state, env, detector, generator, t)?);
    }
    Ok(logs)
}

/// Runs all rounds from a fresh state.
pub fn run(
    config: LoopConfig,
    env: &Environment<'_>,
    detector: &mut dyn DetectorBackend,
    generator: &mut dyn GeneratorBackend,
) -> Result<Vec<RoundLog>, LoopError> {
    let mut state = LoopState::new(config, env)?;
    run_from(&mut state, env, detector, generator)
}
