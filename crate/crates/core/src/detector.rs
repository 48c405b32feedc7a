//! Evidence-augmented detector input, verdicts, and the per-round
//! cross-entropy update.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, ClassifierOutput, DetectorBackend, TokenSequence};
use crate::corpus::Label;
use crate::retrieval::RetrievedPassage;

pub const EVIDENCE_HEADER: &str = "Related news stories from search results:";
pub const CLASSIFY_HEADER: &str = "Predict the plausibility of the following news story:";

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("article text is empty")]
    EmptyArticle,
    #[error("empty training batch")]
    EmptyBatch,
    #[error("unbalanced batch: {reals} reals vs {fakes} fakes")]
    Unbalanced { reals: usize, fakes: usize },
    #[error("non-finite loss (batch {batch}, probabilities {probs:?})")]
    NonFinite { batch: usize, probs: Vec<f64> },
    #[error("backend returned {got} probabilities for a batch of {expected}")]
    BatchMismatch { expected: usize, got: usize },
    #[error("detector backend failed on {input}: {source}")]
    Backend { input: String, source: BackendError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConfidenceBand {
    High,
    Medium,
    Low,
}

impl ConfidenceBand {
    /// Band of the max-class probability: >= 0.9 HIGH, >= 0.7 MEDIUM.
    pub fn from_prob_real(prob_real: f64) -> Self {
        let top = prob_real.max(1.0 - prob_real);
        if top >= 0.9 {
            ConfidenceBand::High
        } else if top >= 0.7 {
            ConfidenceBand::Medium
        } else {
            ConfidenceBand::Low
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConfidenceBand::High => "HIGH",
            ConfidenceBand::Medium => "MEDIUM",
            ConfidenceBand::Low => "LOW",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "HIGH" => Some(ConfidenceBand::High),
            "MEDIUM" => Some(ConfidenceBand::Medium),
            "LOW" => Some(ConfidenceBand::Low),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub prob_real: f64,
    pub predicted_label: Label,
    pub confidence_band: ConfidenceBand,
}

impl Verdict {
    /// REAL iff prob_real > 0.5; exactly 0.5 is FAKE.
    pub fn from_prob_real(prob_real: f64) -> Self {
        let predicted_label = if prob_real > 0.5 { Label::Real } else { Label::Fake };
        Verdict { prob_real, predicted_label, confidence_band: ConfidenceBand::from_prob_real(prob_real) }
    }

    pub fn prob_fake(&self) -> f64 {
        1.0 - self.prob_real
    }
}

/// A rendered detector input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorInput {
    pub evidence: Vec<RetrievedPassage>,
    /// The article as it appears in `rendered` (possibly tail-trimmed).
    pub article: String,
    pub rendered: String,
    /// Byte range of the article inside `rendered`.
    pub article_span: (usize, usize),
}

impl DetectorInput {
    pub fn article_range(&self) -> Range<usize> {
        self.article_span.0..self.article_span.1
    }
}

fn render(passages: &[String], article: &str) -> (String, (usize, usize)) {
    let mut out = String::new();
    let kept: Vec<&String> = passages.iter().filter(|p| !p.is_empty()).collect();
    if !kept.is_empty() {
        out.push_str(EVIDENCE_HEADER);
        out.push_str("\n\n");
        for p in kept {
            out.push_str(p);
            out.push_str("\n\n");
        }
    }
    out.push_str(CLASSIFY_HEADER);
    out.push_str("\n\n");
    let start = out.len();
    out.push_str(article);
    let end = out.len();
    (out, (start, end))
}

fn keep_words(words: &[&str], n: usize) -> String {
    words[..n.min(words.len())].join(" ")
}

/// Renders the detector prompt, trimming to the backend's token budget.
///
/// Over budget, evidence passages lose their tails first, all by the same
/// fraction of their length; the article is tail-trimmed only once no
/// evidence is left.
pub fn assemble_input(
    article: &str,
    evidence: &[RetrievedPassage],
    use_retrieval: bool,
    backend: &dyn DetectorBackend,
) -> Result<DetectorInput, DetectorError> {
    if article.trim().is_empty() {
        return Err(DetectorError::EmptyArticle);
    }
    let evidence: Vec<RetrievedPassage> = if use_retrieval { evidence.to_vec() } else { Vec::new() };
    let max = backend.max_length();
    let fits = |text: &str| backend.tokenize(text).len() <= max;
    let finish = |passages: Vec<String>, article: String| {
        let (rendered, article_span) = render(&passages, &article);
        let evidence = evidence
            .iter()
            .zip(&passages)
            .filter(|(_, t)| !t.is_empty())
            .map(|(p, t)| RetrievedPassage { text: t.clone(), ..p.clone() })
            .collect();
        DetectorInput { evidence, article, rendered, article_span }
    };

    let full: Vec<String> = evidence.iter().map(|p| p.text.clone()).collect();
    if fits(&render(&full, article).0) {
        return Ok(finish(full, article.to_string()));
    }

    let split: Vec<Vec<&str>> = evidence.iter().map(|p| p.text.split_whitespace().collect()).collect();
    let scaled = |permille: usize| -> Vec<String> {
        split.iter().map(|w| keep_words(w, w.len() * permille / 1000)).collect()
    };
    let empty = scaled(0);
    if fits(&render(&empty, article).0) {
        // largest fraction of each passage that still fits
        let (mut lo, mut hi) = (0usize, 1000usize);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if fits(&render(&scaled(mid), article).0) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        return Ok(finish(scaled(lo), article.to_string()));
    }

    let words: Vec<&str> = article.split_whitespace().collect();
    let (mut lo, mut hi) = (1usize, words.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(&render(&empty, &keep_words(&words, mid)).0) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(finish(empty, keep_words(&words, lo)))
}

/// A classification with everything VAF extraction needs.
#[derive(Debug, Clone)]
pub struct Detection {
    pub verdict: Verdict,
    pub tokens: TokenSequence,
    pub output: ClassifierOutput,
}

pub fn classify(input: &DetectorInput, backend: &dyn DetectorBackend, input_id: &str) -> Result<Detection, DetectorError> {
    let tokens = backend.tokenize(&input.rendered);
    let output = backend
        .classify(&tokens)
        .map_err(|source| DetectorError::Backend { input: input_id.to_string(), source })?;
    Ok(Detection { verdict: Verdict::from_prob_real(output.prob_real), tokens, output })
}

/// Binary cross-entropy of one example, with clamped probability.
pub fn cross_entropy(label: Label, prob_real: f64) -> f64 {
    let p = prob_real.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let y = label.as_target();
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn mean_cross_entropy(examples: &[(Label, f64)]) -> f64 {
    examples.iter().map(|&(y, p)| cross_entropy(y, p)).sum::<f64>() / examples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr: f64,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub mean_loss: f64,
    pub examples: usize,
    pub batches: usize,
}

/// One shuffled pass over the union of reals and fakes. Returns the mean
/// per-example cross-entropy over the forward passes the updates used.
pub fn train_round(
    backend: &mut dyn DetectorBackend,
    reals: &[DetectorInput],
    fakes: &[DetectorInput],
    params: &TrainParams,
) -> Result<TrainOutcome, DetectorError> {
    if reals.len() != fakes.len() {
        return Err(DetectorError::Unbalanced { reals: reals.len(), fakes: fakes.len() });
    }
    if reals.is_empty() || params.batch_size == 0 {
        return Err(DetectorError::EmptyBatch);
    }
    let mut examples: Vec<(TokenSequence, Label)> = reals
        .iter()
        .map(|i| (backend.tokenize(&i.rendered), Label::Real))
        .chain(fakes.iter().map(|i| (backend.tokenize(&i.rendered), Label::Fake)))
        .collect();
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(params.shuffle_seed));

    let mut total = 0.0;
    let mut batches = 0;
    for (b, batch) in examples.chunks(params.batch_size).enumerate() {
        let probs = backend
            .train_step(batch, params.lr)
            .map_err(|source| DetectorError::Backend { input: format!("training batch {b}"), source })?;
        if probs.len() != batch.len() {
            return Err(DetectorError::BatchMismatch { expected: batch.len(), got: probs.len() });
        }
        let loss: f64 = batch.iter().zip(&probs).map(|((_, y), &p)| cross_entropy(*y, p)).sum();
        if !loss.is_finite() {
            return Err(DetectorError::NonFinite { batch: b, probs });
        }
        total += loss;
        batches += 1;
    }
    Ok(TrainOutcome { mean_loss: total / examples.len() as f64, examples: examples.len(), batches })
}
