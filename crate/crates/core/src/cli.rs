//! The `advnews` command line: corpus preparation, index build, training,
//! ablations, reports, and VAF inspection.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error, 3 backend
//! failure.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backends::{self, BackendError, DetectorBackend, EmbeddingBackend, GeneratorBackend, Settings};
use crate::corpus::{self, CorpusError, CorpusStore, InputFormat};
use crate::detector::{self, assemble_input, DetectorError};
use crate::eval::{self, AblationAxis, EvalError};
use crate::exec::Exec;
use crate::retrieval::{self, Metric, RetrievalError, VectorIndex};
use crate::training::{self, BackendRecord, Environment, LoopConfig, LoopError, LoopState, RetrievalContext, RoundLog, RunLock};
use crate::vaf::{self, ReasonLexicons, StyleThresholds, Stopwords, VafError, VafReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Settings { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Embedding { .. } | RetrievalError::QueryEmbedding(_) => CliError::Backend(e.to_string()),
            RetrievalError::InvalidK => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<LoopError> for CliError {
    fn from(e: LoopError) -> Self {
        match e {
            LoopError::Config(_) => CliError::Validation(e.to_string()),
            _ if e.is_backend() => CliError::Backend(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<DetectorError> for CliError {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::Backend { .. } => CliError::Backend(e.to_string()),
            DetectorError::EmptyArticle => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<VafError> for CliError {
    fn from(e: VafError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus_dir: PathBuf,
    pub index_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { corpus_dir: "data/corpus".into(), index_dir: "data/index".into(), run_dir: "runs/default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    pub embedding: String,
    pub detector: String,
    pub generator: String,
    /// Free-form model identifier, recorded in round logs.
    pub model: Option<String>,
    pub embedding_settings: Settings,
    pub detector_settings: Settings,
    pub generator_settings: Settings,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            embedding: "stub".into(),
            detector: "stub".into(),
            generator: "stub".into(),
            model: None,
            embedding_settings: Settings::new(),
            detector_settings: Settings::new(),
            generator_settings: Settings::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LexiconConfig {
    /// Term files; `None` uses the built-in lists.
    pub sensational: Option<PathBuf>,
    pub vague: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub style: StyleThresholds,
    pub fact_threshold: f64,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        LexiconConfig { sensational: None, vague: None, stopwords: None, style: StyleThresholds::default(), fact_threshold: 0.7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub metric: Metric,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { metric: Metric::InnerProduct }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecConfig {
    /// Fan out per-article and scoring loops.
    pub parallel: bool,
    /// Run ablation cells concurrently (stub backends only).
    pub parallel_cells: bool,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig { parallel: true, parallel_cells: false }
    }
}

/// The full configuration of a run. Every value has a default, unknown keys
/// are rejected, and the defaulted form is echoed into the run directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    #[serde(rename = "loop")]
    pub training: LoopConfig,
    pub backends: BackendsConfig,
    pub lexicons: LexiconConfig,
    pub retrieval: RetrievalConfig,
    pub exec: ExecConfig,
}

impl RunConfig {
    /// Parses TOML, or JSON for `.json` files (the echoed form).
    pub fn parse(text: &str, json: bool) -> Result<Self, CliError> {
        let config: RunConfig = if json {
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?
        };
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e == "json");
        let mut config = RunConfig::parse(&text, json)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.paths.corpus_dir);
        resolve(&mut config.paths.index_dir);
        resolve(&mut config.paths.run_dir);
        for p in [&mut config.lexicons.sensational, &mut config.lexicons.vague, &mut config.lexicons.stopwords]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.training.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.lexicons.fact_threshold) {
            return Err(CliError::Validation("lexicons.fact_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn exec(&self) -> Exec {
        if self.exec.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    fn backend_record(&self, embedding: Option<&dyn EmbeddingBackend>, detector: &dyn DetectorBackend, generator: &dyn GeneratorBackend) -> BackendRecord {
        let b = &self.backends;
        BackendRecord {
            embedding: embedding.map(|e| e.identifier()),
            detector: detector.identifier(),
            generator: generator.identifier(),
            model: b.model.clone(),
            settings: serde_json::json!({
                "embedding": { "name": b.embedding, "settings": b.embedding_settings },
                "detector": { "name": b.detector, "settings": b.detector_settings },
                "generator": { "name": b.generator, "settings": b.generator_settings },
            }),
        }
    }

    fn lexicons(&self) -> Result<(ReasonLexicons, Stopwords), CliError> {
        let l = &self.lexicons;
        let mut lexicons = ReasonLexicons::from_files(l.sensational.as_deref(), l.vague.as_deref())?;
        lexicons.style = l.style;
        lexicons.fact_threshold = l.fact_threshold;
        let stopwords = match &l.stopwords {
            Some(p) => Stopwords::from_file(p)?,
            None => Stopwords::default(),
        };
        Ok((lexicons, stopwords))
    }
}

#[derive(Debug, Parser)]
#[command(name = "advnews", version, about = "Adversarial co-training of a fake-news rewriter and a retrieval-augmented detector")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a JSONL or CSV corpus, exclude seeds, deduplicate, and write a store.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// File with one seed article id per line.
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        shingle_size: usize,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long)]
        no_dedup: bool,
    },
    /// Embed the retrieval corpus and persist the index.
    BuildIndex {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the co-training loop.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue after the last completed round in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run an ablation matrix (axis: retrieval or feedback).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
    },
    /// Training-dynamics table and chart from run directories.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Round range; defaults to the latest round any run logged.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Classify one article and print its VAF report.
    InspectVaf {
        #[arg(long)]
        article: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Detector checkpoint directory to load first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
}

pub fn cmd_prepare(
    input: &Path,
    out: &Path,
    seeds: Option<&Path>,
    shingle_size: usize,
    threshold: Option<f64>,
) -> Result<CorpusStore, CliError> {
    let format = InputFormat::from_path(input)
        .ok_or_else(|| CliError::Validation(format!("{}: expected a .jsonl or .csv file", input.display())))?;
    let file = fs::File::open(input).map_err(|e| CliError::Validation(format!("{}: {e}", input.display())))?;
    let ingested = corpus::ingest(BufReader::new(file), format)?;
    if ingested.skipped > 0 {
        log::warn!("skipped {} empty records", ingested.skipped);
    }
    let mut store = ingested.store;
    if let Some(path) = seeds {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let (s, unknown) = corpus::exclude_seeds(store, &corpus::read_id_list(&text));
        if !unknown.is_empty() {
            log::warn!("{} seed ids are not in the corpus", unknown.len());
        }
        store = s;
    }
    if let Some(t) = threshold {
        store = corpus::deduplicate(store, shingle_size, t)?;
    }
    store.save(out)?;
    log::info!("wrote {} articles ({} removed as duplicates) to {}", store.len(), store.dedup_manifest().len(), out.display());
    Ok(store)
}

fn build_embedder(config: &RunConfig) -> Result<Box<dyn EmbeddingBackend>, CliError> {
    Ok(backends::build_embedding(&config.backends.embedding, &config.backends.embedding_settings)?)
}

pub fn cmd_build_index(config: &RunConfig) -> Result<VectorIndex, CliError> {
    let store = CorpusStore::load(&config.paths.corpus_dir)?;
    let embedder = build_embedder(config)?;
    let index = retrieval::build_index_with(&store, embedder.as_ref(), config.retrieval.metric, config.exec())?;
    index.save(&config.paths.index_dir)?;
    log::info!("indexed {} passages into {}", index.len(), config.paths.index_dir.display());
    Ok(index)
}

/// Loaded inputs for a training run.
struct Prepared {
    store: CorpusStore,
    index: Option<VectorIndex>,
    embedder: Option<Box<dyn EmbeddingBackend>>,
    lexicons: ReasonLexicons,
    stopwords: Stopwords,
}

fn prepare_run(config: &RunConfig, needs_retrieval: bool) -> Result<Prepared, CliError> {
    let store = CorpusStore::load(&config.paths.corpus_dir)?;
    let (index, embedder) = if needs_retrieval {
        (Some(VectorIndex::load(&config.paths.index_dir, &store)?), Some(build_embedder(config)?))
    } else {
        (None, None)
    };
    let (lexicons, stopwords) = config.lexicons()?;
    Ok(Prepared { store, index, embedder, lexicons, stopwords })
}

fn environment<'a>(
    config: &RunConfig,
    p: &'a Prepared,
    run_dir: Option<&'a Path>,
    backends: BackendRecord,
) -> Environment<'a> {
    Environment {
        store: &p.store,
        retrieval: p
            .index
            .as_ref()
            .zip(p.embedder.as_deref())
            .map(|(index, embedder)| RetrievalContext { index, embedder }),
        stopwords: &p.stopwords,
        lexicons: &p.lexicons,
        exec: config.exec(),
        run_dir,
        backends,
    }
}

fn uses_retrieval(l: &LoopConfig) -> bool {
    l.generator_retrieval || l.detector_retrieval
}

/// Runs (or resumes) the loop for `config` in `run_dir`.
fn train_in(config: &RunConfig, run_dir: &Path, resume: bool, prepared: &Prepared) -> Result<Vec<RoundLog>, CliError> {
    let has_rounds = run_dir.join(training::ROUNDS_DIR).join("1.jsonl").exists();
    if has_rounds && !resume {
        return Err(CliError::Validation(format!("{} already holds a run; pass --resume to continue it", run_dir.display())));
    }
    let _lock = RunLock::acquire(run_dir)?;
    let echo = run_dir.join(training::CONFIG_FILE);
    if resume && echo.exists() {
        let text = fs::read_to_string(&echo).map_err(|e| io_err(&echo, e))?;
        let previous = RunConfig::parse(&text, true)?;
        if previous.training != config.training {
            log::warn!("resuming with loop settings that differ from {}", echo.display());
        }
    }
    let mut echoed = config.clone();
    echoed.paths.run_dir = run_dir.to_path_buf();
    fs::write(&echo, echoed.to_json()).map_err(|e| io_err(&echo, e))?;

    let b = &config.backends;
    let mut detector = backends::build_detector(&b.detector, &b.detector_settings)?;
    let mut generator = backends::build_generator(&b.generator, &b.generator_settings)?;
    let record = config.backend_record(prepared.embedder.as_deref(), detector.as_ref(), generator.as_ref());
    let env = environment(config, prepared, Some(run_dir), record);
    let mut state = if resume {
        LoopState::resume(config.training.clone(), &env, run_dir, detector.as_mut(), generator.as_mut())?
    } else {
        LoopState::new(config.training.clone(), &env)?
    };
    if state.completed >= config.training.rounds {
        log::info!("all {} rounds already completed", config.training.rounds);
    }
    Ok(training::run_from(&mut state, &env, detector.as_mut(), generator.as_mut())?)
}

pub fn cmd_train(config: &RunConfig, resume: bool) -> Result<Vec<RoundLog>, CliError> {
    let prepared = prepare_run(config, uses_retrieval(&config.training))?;
    train_in(config, &config.paths.run_dir, resume, &prepared)
}

pub fn cmd_ablate(config: &RunConfig, axis: &str) -> Result<Vec<eval::AblationCell>, CliError> {
    let axis: AblationAxis = axis.parse().map_err(CliError::Validation)?;
    // every axis has cells that retrieve
    let prepared = prepare_run(config, true)?;
    let root = &config.paths.run_dir;
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let exec = if config.exec.parallel_cells { Exec::Parallel } else { Exec::Sequential };
    let cells = eval::ablation_matrix(&config.training, axis, exec, |variant, loop_config| {
        let cell = RunConfig { training: loop_config, ..config.clone() };
        train_in(&cell, &root.join(&variant.slug), false, &prepared).map_err(|e| e.to_string())
    });
    let name = format!("ablation_{}", serde_json::to_value(axis).unwrap().as_str().unwrap());
    let csv = root.join(format!("{name}.csv"));
    fs::write(&csv, eval::ablation_csv(&cells)).map_err(|e| io_err(&csv, e))?;
    let json = root.join(format!("{name}.json"));
    fs::write(&json, serde_json::to_string_pretty(&cells).unwrap() + "\n").map_err(|e| io_err(&json, e))?;
    for c in &cells {
        if let Some(e) = &c.error {
            log::error!("cell {} failed: {e}", c.variant.name);
        }
    }
    Ok(cells)
}

pub fn cmd_report(runs: &[PathBuf], out: &Path, rounds: Option<usize>) -> Result<eval::DynamicsReport, CliError> {
    let named: Vec<(String, PathBuf)> = runs
        .iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
            (name, p.clone())
        })
        .collect();
    for (_, p) in &named {
        if !p.is_dir() {
            return Err(CliError::Validation(format!("{} is not a run directory", p.display())));
        }
    }
    let report = eval::dynamics_report(&named, rounds)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (file, body) in [
        ("dynamics.csv", report.to_csv()),
        ("dynamics.svg", report.to_svg()),
        ("dynamics.json", serde_json::to_string_pretty(&report).unwrap() + "\n"),
    ] {
        let path = out.join(file);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    }
    Ok(report)
}

/// Classifies one article and builds its report. Evidence is retrieved when
/// detector-side retrieval is on and an index exists.
pub fn cmd_inspect_vaf(article: &Path, config: &RunConfig, checkpoint: Option<&Path>, round: usize) -> Result<VafReport, CliError> {
    let text = fs::read_to_string(article).map_err(|e| CliError::Validation(format!("{}: {e}", article.display())))?;
    let text = crate::text::normalize_whitespace(&text);
    let b = &config.backends;
    let mut detector = backends::build_detector(&b.detector, &b.detector_settings)?;
    if let Some(dir) = checkpoint {
        detector.load(dir)?;
    }
    let (lexicons, stopwords) = config.lexicons()?;

    let mut evidence = Vec::new();
    let use_retrieval = config.training.detector_retrieval && config.paths.index_dir.join(retrieval::MANIFEST).exists();
    if use_retrieval {
        let store = CorpusStore::load(&config.paths.corpus_dir)?;
        let index = VectorIndex::load(&config.paths.index_dir, &store)?;
        let embedder = build_embedder(config)?;
        evidence = retrieval::query(&index, embedder.as_ref(), &store, &text, config.training.k, config.training.max_passage_words, config.exec())?;
    }
    let input = assemble_input(&text, &evidence, use_retrieval, detector.as_ref())?;
    let detection = detector::classify(&input, detector.as_ref(), &article.display().to_string())?;
    let tokens = vaf::extract_salient_tokens(
        &detection.output.attention,
        &detection.tokens,
        config.training.salient_top_k,
        &stopwords,
        Some(input.article_span),
    );
    let reasons = vaf::classify_reasons(&input.article, &detection.verdict, &tokens, &lexicons);
    Ok(VafReport::new(round, detection.verdict, tokens, reasons))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Prepare { input, out, seeds, shingle_size, threshold, no_dedup } => {
            if shingle_size == 0 || !(0.0..=1.0).contains(&threshold) {
                return Err(CliError::Validation("shingle size must be positive and threshold in [0, 1]".into()));
            }
            cmd_prepare(&input, &out, seeds.as_deref(), shingle_size, (!no_dedup).then_some(threshold)).map(|_| ())
        }
        Command::BuildIndex { config } => cmd_build_index(&RunConfig::load(&config)?).map(|_| ()),
        Command::Train { config, resume } => {
            let logs = cmd_train(&RunConfig::load(&config)?, resume)?;
            for l in logs {
                println!(
                    "round {}: fool_rate={:.3} n_success={} detector_loss={:.4} eval_auc={}",
                    l.round,
                    l.fool_rate,
                    l.n_success,
                    l.detector_loss,
                    eval::format_auc(l.eval_auc)
                );
            }
            Ok(())
        }
        Command::Ablate { config, axis } => {
            let cells = cmd_ablate(&RunConfig::load(&config)?, &axis)?;
            print!("{}", eval::ablation_csv(&cells));
            Ok(())
        }
        Command::Report { runs, out, rounds } => {
            let report = cmd_report(&runs, &out, rounds)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::InspectVaf { article, config, checkpoint, round } => {
            let report = cmd_inspect_vaf(&article, &RunConfig::load(&config)?, checkpoint.as_deref(), round)?;
            println!("{}", vaf::describe(&report));
            Ok(())
        }
    }
}

/// Entry point shared by the binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
