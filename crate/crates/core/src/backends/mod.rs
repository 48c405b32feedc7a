//! Pluggable model contracts and the deterministic stubs that satisfy them.
//!
//! The framework never talks to a model directly: retrieval goes through
//! [`EmbeddingBackend`], detection through [`DetectorBackend`], rewriting
//! through [`GeneratorBackend`]. Backends are chosen by registry name; any
//! adapter-specific settings travel as an opaque JSON table and are recorded
//! verbatim in round logs.

mod conformance;
mod stub;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;

pub use conformance::{verify_backend, BackendRef, CheckResult, ConformanceReport};
pub use stub::{StubDetector, StubDetectorSettings, StubEmbedding, StubEmbeddingSettings, StubGenerator, StubGeneratorSettings};

/// Opaque adapter settings, recorded verbatim in logs.
pub type Settings = serde_json::Map<String, serde_json::Value>;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend failure: {0}")]
    Failed(String),
    #[error("backend {0:?} is not available in this build")]
    Unavailable(String),
    #[error("invalid settings for backend {backend:?}: {message}")]
    Settings { backend: String, message: String },
    #[error("checkpoint io at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl BackendError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        BackendError::Io { path: path.display().to_string(), source }
    }
}

pub trait EmbeddingBackend: Send + Sync {
    fn identifier(&self) -> String;
    fn dimension(&self) -> usize;
    /// Context-side encoder. Truncates to the backend's input limit.
    fn embed_passage(&self, text: &str) -> Result<Vec<f32>, BackendError>;
    /// Question-side encoder.
    fn embed_query(&self, text: &str) -> Result<Vec<f32>, BackendError>;
}

/// One token of a detector input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub piece: String,
    /// Byte span into [`TokenSequence::text`]; empty for special tokens.
    pub span: (usize, usize),
    pub special: bool,
    /// Index into [`TokenSequence::words`] (subword-to-word alignment).
    pub word: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub text: String,
    pub tokens: Vec<Token>,
    /// Byte spans of whole words in `text`.
    pub words: Vec<(usize, usize)>,
    pub cls_index: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn word_text(&self, word: usize) -> &str {
        let (s, e) = self.words[word];
        &self.text[s..e]
    }
}

/// Final-layer attention, laid out `[head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    heads: usize,
    len: usize,
    weights: Vec<f32>,
}

impl Attention {
    pub fn new(heads: usize, len: usize, weights: Vec<f32>) -> Result<Self, BackendError> {
        if weights.len() != heads * len * len {
            return Err(BackendError::Failed(format!(
                "attention has {} weights, expected {heads}x{len}x{len}",
                weights.len()
            )));
        }
        Ok(Attention { heads, len, weights })
    }

    /// Builds attention where every row except `query` is uniform.
    pub fn from_query_rows(len: usize, query: usize, rows: &[Vec<f32>]) -> Result<Self, BackendError> {
        let uniform = 1.0 / len as f32;
        let mut weights = Vec::with_capacity(rows.len() * len * len);
        for row in rows {
            if row.len() != len {
                return Err(BackendError::Failed("attention row length mismatch".into()));
            }
            for q in 0..len {
                if q == query {
                    weights.extend_from_slice(row);
                } else {
                    weights.extend(std::iter::repeat_n(uniform, len));
                }
            }
        }
        Attention::new(rows.len(), len, weights)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, head: usize, query: usize) -> &[f32] {
        let start = (head * self.len + query) * self.len;
        &self.weights[start..start + self.len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.weights.chunks(self.len.max(1))
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    pub prob_real: f64,
    pub prob_fake: f64,
    pub attention: Attention,
}

pub trait DetectorBackend: Send + Sync {
    fn identifier(&self) -> String;
    /// Maximum input length in tokens, special tokens included.
    fn max_length(&self) -> usize;
    /// Untruncated tokenization with special tokens.
    fn tokenize(&self, text: &str) -> TokenSequence;
    /// Evaluation-mode forward pass.
    fn classify(&self, tokens: &TokenSequence) -> Result<ClassifierOutput, BackendError>;
    /// One optimizer step on `batch`. Returns P(real) of each example from the
    /// forward pass the gradient was taken on, in batch order.
    fn train_step(&mut self, batch: &[(TokenSequence, Label)], lr: f64) -> Result<Vec<f64>, BackendError>;
    fn save(&self, dir: &Path) -> Result<(), BackendError>;
    fn load(&mut self, dir: &Path) -> Result<(), BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { temperature: 0.7, top_p: 0.9, max_new_tokens: 1024, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub system: String,
    pub user: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftParams {
    pub lr: f64,
    pub kl_weight: f64,
    pub clip_norm: f64,
}

/// Loss components reported by a fine-tuning pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftLosses {
    pub ce_loss: f64,
    pub kl_value: f64,
}

pub trait GeneratorBackend: Send + Sync {
    fn identifier(&self) -> String;
    /// Maximum number of concurrent `generate` calls the backend tolerates.
    fn max_concurrency(&self) -> usize {
        1
    }
    fn generate(&self, system: &str, user: &str, params: &DecodeParams) -> Result<String, BackendError>;
    fn sft_round(&mut self, examples: &[SftExample], params: &SftParams) -> Result<SftLosses, BackendError>;
    fn save(&self, dir: &Path) -> Result<(), BackendError>;
    fn load(&mut self, dir: &Path) -> Result<(), BackendError>;
}

fn parse_settings<T: serde::de::DeserializeOwned + Default>(name: &str, settings: &Settings) -> Result<T, BackendError> {
    if settings.is_empty() {
        return Ok(T::default());
    }
    serde_json::from_value(serde_json::Value::Object(settings.clone()))
        .map_err(|e| BackendError::Settings { backend: name.to_string(), message: e.to_string() })
}

/// Registry names that resolve to real-model adapters. None ship in this
/// build; selecting one yields [`BackendError::Unavailable`].
pub const ADAPTER_NAMES: &[&str] = &["hf-encoder", "hf-causal", "dpr"];

fn unknown(name: &str) -> BackendError {
    if ADAPTER_NAMES.contains(&name) {
        BackendError::Unavailable(name.to_string())
    } else {
        BackendError::Settings { backend: name.to_string(), message: "unknown backend name".into() }
    }
}

pub fn build_embedding(name: &str, settings: &Settings) -> Result<Box<dyn EmbeddingBackend>, BackendError> {
    match name {
        "stub" => Ok(Box::new(StubEmbedding::new(parse_settings(name, settings)?))),
        _ => Err(unknown(name)),
    }
}

pub fn build_detector(name: &str, settings: &Settings) -> Result<Box<dyn DetectorBackend>, BackendError> {
    match name {
        "stub" => Ok(Box::new(StubDetector::new(parse_settings(name, settings)?))),
        _ => Err(unknown(name)),
    }
}

pub fn build_generator(name: &str, settings: &Settings) -> Result<Box<dyn GeneratorBackend>, BackendError> {
    match name {
        "stub" => Ok(Box::new(StubGenerator::new(parse_settings(name, settings)?))),
        _ => Err(unknown(name)),
    }
}
