//! Deterministic stand-ins for the three model roles.
//!
//! The stubs are causally linked: the generator can inject a marker word and
//! the detector learns to penalize it, so feedback-loop tests have a known
//! dynamic.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    Attention, BackendError, ClassifierOutput, DecodeParams, DetectorBackend, EmbeddingBackend, GeneratorBackend,
    SftExample, SftLosses, SftParams, Token, TokenSequence,
};
use crate::corpus::Label;
use crate::detector::{CLASSIFY_HEADER, EVIDENCE_HEADER};
use crate::prompts::{extract_article, flagged_terms};
use crate::text::{content_words, fnv1a, parse_term_list, words_with_spans};
use crate::vaf::{DEFAULT_SENSATIONAL, DEFAULT_VAGUE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubEmbeddingSettings {
    pub dimension: usize,
    /// Input limit in words.
    pub max_words: usize,
}

impl Default for StubEmbeddingSettings {
    fn default() -> Self {
        StubEmbeddingSettings { dimension: 64, max_words: 512 }
    }
}

/// Signed feature hashing of lowercased words, L2-normalized.
#[derive(Debug, Clone)]
pub struct StubEmbedding {
    settings: StubEmbeddingSettings,
}

impl StubEmbedding {
    pub fn new(settings: StubEmbeddingSettings) -> Self {
        StubEmbedding { settings }
    }

    fn featurize(&self, text: &str) -> Vec<f32> {
        let d = self.settings.dimension;
        let mut v = vec![0.0f64; d];
        for w in content_words(text).iter().take(self.settings.max_words) {
            let h = fnv1a(w.as_bytes());
            let sign = if (h >> 40) & 1 == 0 { 1.0 } else { -1.0 };
            v[(h % d as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v.into_iter().map(|x| x as f32).collect()
    }
}

impl EmbeddingBackend for StubEmbedding {
    fn identifier(&self) -> String {
        format!("stub-embedding-d{}", self.settings.dimension)
    }

    fn dimension(&self) -> usize {
        self.settings.dimension
    }

    fn embed_passage(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        Ok(self.featurize(text))
    }

    fn embed_query(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        Ok(self.featurize(text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubDetectorSettings {
    pub max_length: usize,
    pub heads: usize,
    /// Words longer than this many characters are split into pieces.
    pub max_piece_chars: usize,
    pub bias: f64,
    pub sensational_weight: f64,
    pub vague_weight: f64,
    pub marker: String,
    /// Initial weight of the marker feature; learned during training.
    pub marker_weight: f64,
    /// Initial weight of the unsupported-entity feature; learned.
    pub unsupported_weight: f64,
    /// Gradient step for learned weights (the configured lr is recorded, not
    /// used, so the stub moves visibly at desk scale).
    pub step_size: f64,
    /// Extra attention mass on rule-matched tokens.
    pub rule_attention: f64,
    /// When set, every input scores this prob_real and nothing is learned.
    pub fixed_prob_real: Option<f64>,
}

impl Default for StubDetectorSettings {
    fn default() -> Self {
        StubDetectorSettings {
            max_length: 512,
            heads: 2,
            max_piece_chars: 8,
            bias: 1.0,
            sensational_weight: -2.0,
            vague_weight: -1.5,
            marker: "xqzv".into(),
            marker_weight: 0.0,
            unsupported_weight: 0.0,
            step_size: 1.0,
            rule_attention: 20.0,
            fixed_prob_real: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LearnedWeights {
    marker: f64,
    unsupported: f64,
    train_steps: usize,
}

/// Logistic rule over lexicon hits, marker hits, and (with evidence) the
/// share of capitalized words the evidence does not mention.
#[derive(Debug, Clone)]
pub struct StubDetector {
    settings: StubDetectorSettings,
    sensational: Vec<Vec<String>>,
    vague: Vec<Vec<String>>,
    learned: LearnedWeights,
}

/// Rule features of one input plus the words that triggered them.
#[derive(Debug, Default)]
struct Features {
    sensational: f64,
    vague: f64,
    marker: f64,
    unsupported: f64,
    lexicon_words: BTreeSet<usize>,
    marker_words: BTreeSet<usize>,
    unsupported_words: BTreeSet<usize>,
}

/// Starting word indices where `phrase` occurs in `words`.
fn phrase_hits(words: &[String], phrase: &[String]) -> Vec<usize> {
    if phrase.is_empty() || phrase.len() > words.len() {
        return Vec::new();
    }
    (0..=words.len() - phrase.len()).filter(|&i| words[i..i + phrase.len()] == *phrase).collect()
}

impl StubDetector {
    pub fn new(settings: StubDetectorSettings) -> Self {
        let phrases = |src: &str| parse_term_list(src).iter().map(|t| content_words(t)).collect();
        let learned = LearnedWeights { marker: settings.marker_weight, unsupported: settings.unsupported_weight, train_steps: 0 };
        StubDetector { sensational: phrases(DEFAULT_SENSATIONAL), vague: phrases(DEFAULT_VAGUE), settings, learned }
    }

    pub fn marker_weight(&self) -> f64 {
        self.learned.marker
    }

    pub fn train_steps(&self) -> usize {
        self.learned.train_steps
    }

    fn features(&self, seq: &TokenSequence) -> Features {
        let text = &seq.text;
        let marker_key = format!("{CLASSIFY_HEADER}\n\n");
        let (article_start, evidence) = match text.rfind(&marker_key) {
            Some(pos) => {
                let ev = text[..pos].strip_prefix(EVIDENCE_HEADER).unwrap_or("");
                (pos + marker_key.len(), ev)
            }
            None => (0, ""),
        };
        // alphanumeric article words, with their index into seq.words
        let article: Vec<(usize, String)> = seq
            .words
            .iter()
            .enumerate()
            .filter(|(_, (s, _))| *s >= article_start)
            .map(|(i, _)| (i, seq.word_text(i)))
            .filter(|(_, w)| w.chars().any(char::is_alphanumeric))
            .map(|(i, w)| (i, w.to_lowercase()))
            .collect();
        let lower: Vec<String> = article.iter().map(|(_, w)| w.clone()).collect();

        let mut f = Features::default();
        for phrase in &self.sensational {
            for start in phrase_hits(&lower, phrase) {
                f.sensational += 1.0;
                f.lexicon_words.extend(article[start..start + phrase.len()].iter().map(|(i, _)| *i));
            }
        }
        for phrase in &self.vague {
            for start in phrase_hits(&lower, phrase) {
                f.vague += 1.0;
                f.lexicon_words.extend(article[start..start + phrase.len()].iter().map(|(i, _)| *i));
            }
        }
        let marker = self.settings.marker.to_lowercase();
        for (i, w) in &article {
            if *w == marker {
                f.marker += 1.0;
                f.marker_words.insert(*i);
            }
        }
        if !evidence.trim().is_empty() {
            let known: BTreeSet<String> = content_words(evidence).into_iter().collect();
            let caps: Vec<&(usize, String)> = article
                .iter()
                .filter(|(i, _)| seq.word_text(*i).chars().next().is_some_and(char::is_uppercase))
                .collect();
            for (i, w) in &caps {
                if !known.contains(w) {
                    f.unsupported_words.insert(*i);
                }
            }
            if !caps.is_empty() {
                f.unsupported = f.unsupported_words.len() as f64 / caps.len() as f64;
            }
        }
        f
    }

    fn prob_real(&self, f: &Features) -> f64 {
        if let Some(p) = self.settings.fixed_prob_real {
            return p;
        }
        let s = &self.settings;
        let z = s.bias
            + s.sensational_weight * f.sensational
            + s.vague_weight * f.vague
            + self.learned.marker * f.marker
            + self.learned.unsupported * f.unsupported;
        1.0 / (1.0 + (-z).exp())
    }

    fn attention(&self, seq: &TokenSequence, f: &Features) -> Result<Attention, BackendError> {
        let n = seq.len();
        let active = |w: f64| w < -0.05;
        let mut hot: BTreeSet<usize> = f.lexicon_words.clone();
        if active(self.learned.marker) {
            hot.extend(&f.marker_words);
        }
        if active(self.learned.unsupported) {
            hot.extend(&f.unsupported_words);
        }
        let rows: Vec<Vec<f32>> = (0..self.settings.heads.max(1))
            .map(|h| {
                let bonus = self.settings.rule_attention / (h + 1) as f64;
                let raw: Vec<f64> = seq
                    .tokens
                    .iter()
                    .map(|t| match t.word {
                        _ if t.special => 0.5,
                        Some(w) if hot.contains(&w) => 1.0 + bonus,
                        _ => 1.0,
                    })
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|x| (x / total) as f32).collect()
            })
            .collect();
        Attention::from_query_rows(n, seq.cls_index, &rows)
    }
}

impl DetectorBackend for StubDetector {
    fn identifier(&self) -> String {
        "stub-detector".into()
    }

    fn max_length(&self) -> usize {
        self.settings.max_length
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        let special = |piece: &str| Token { piece: piece.into(), span: (0, 0), special: true, word: None };
        let mut tokens = vec![special("[CLS]")];
        let mut words = Vec::new();
        let max = self.settings.max_piece_chars.max(1);
        for w in words_with_spans(text) {
            let wi = words.len();
            words.push((w.start, w.end));
            let chars: Vec<(usize, char)> = w.text.char_indices().collect();
            for (pi, chunk) in chars.chunks(max).enumerate() {
                let s = w.start + chunk[0].0;
                let e = chunk.last().map_or(s, |&(b, c)| w.start + b + c.len_utf8());
                let piece = if pi == 0 { text[s..e].to_string() } else { format!("##{}", &text[s..e]) };
                tokens.push(Token { piece, span: (s, e), special: false, word: Some(wi) });
            }
        }
        tokens.push(special("[SEP]"));
        TokenSequence { text: text.to_string(), tokens, words, cls_index: 0 }
    }

    fn classify(&self, tokens: &TokenSequence) -> Result<ClassifierOutput, BackendError> {
        let f = self.features(tokens);
        let prob_real = self.prob_real(&f);
        Ok(ClassifierOutput { prob_real, prob_fake: 1.0 - prob_real, attention: self.attention(tokens, &f)? })
    }

    fn train_step(&mut self, batch: &[(TokenSequence, Label)], _lr: f64) -> Result<Vec<f64>, BackendError> {
        let feats: Vec<Features> = batch.iter().map(|(t, _)| self.features(t)).collect();
        let probs: Vec<f64> = feats.iter().map(|f| self.prob_real(f)).collect();
        if self.settings.fixed_prob_real.is_none() && !batch.is_empty() {
            let n = batch.len() as f64;
            let (mut gm, mut gu) = (0.0, 0.0);
            for ((f, (_, y)), p) in feats.iter().zip(batch).zip(&probs) {
                let err = p - y.as_target();
                gm += err * f.marker;
                gu += err * f.unsupported;
            }
            self.learned.marker -= self.settings.step_size * gm / n;
            self.learned.unsupported -= self.settings.step_size * gu / n;
        }
        self.learned.train_steps += 1;
        Ok(probs)
    }

    fn save(&self, dir: &Path) -> Result<(), BackendError> {
        fs::create_dir_all(dir).map_err(|e| BackendError::io(dir, e))?;
        let path = dir.join("stub_detector.json");
        fs::write(&path, serde_json::to_vec(&self.learned).expect("weights serialize")).map_err(|e| BackendError::io(&path, e))
    }

    fn load(&mut self, dir: &Path) -> Result<(), BackendError> {
        let path = dir.join("stub_detector.json");
        let bytes = fs::read(&path).map_err(|e| BackendError::io(&path, e))?;
        self.learned = serde_json::from_slice(&bytes).map_err(|e| BackendError::Failed(format!("bad checkpoint: {e}")))?;
        Ok(())
    }
}

fn default_replacements() -> BTreeMap<String, String> {
    [
        ("shocking", "notable"),
        ("unbelievable", "unexpected"),
        ("stunning", "notable"),
        ("bombshell", "significant"),
        ("outrageous", "controversial"),
        ("jaw-dropping", "remarkable"),
        ("explosive", "significant"),
        ("reportedly", "officially"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubGeneratorSettings {
    /// Replaces the first capitalized mid-sentence word.
    pub replacement_entity: String,
    pub inject_marker: bool,
    pub marker: String,
    /// Flagged words found here are swapped for their neutral value.
    pub neutral_replacements: BTreeMap<String, String>,
    /// Text prepended to every generation (exercises the sanitizer).
    pub prefix: String,
    /// Articles containing this text produce an empty generation.
    pub fail_on: Option<String>,
    pub ce_loss: f64,
    pub kl_value: f64,
    pub non_finite_loss: bool,
    pub max_concurrency: usize,
}

impl Default for StubGeneratorSettings {
    fn default() -> Self {
        StubGeneratorSettings {
            replacement_entity: "Northbridge".into(),
            inject_marker: false,
            marker: "xqzv".into(),
            neutral_replacements: default_replacements(),
            prefix: String::new(),
            fail_on: None,
            ce_loss: 1.2,
            kl_value: 0.5,
            non_finite_loss: false,
            max_concurrency: 4,
        }
    }
}

/// Copies the article, swaps one entity, optionally injects the marker, and
/// neutralizes words the feedback flagged.
#[derive(Debug)]
pub struct StubGenerator {
    settings: StubGeneratorSettings,
    sft_calls: usize,
    generate_calls: AtomicUsize,
}

impl StubGenerator {
    pub fn new(settings: StubGeneratorSettings) -> Self {
        StubGenerator { settings, sft_calls: 0, generate_calls: AtomicUsize::new(0) }
    }

    pub fn sft_calls(&self) -> usize {
        self.sft_calls
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::Relaxed)
    }

    fn rewrite_article(&self, article: &str, flagged: &[String]) -> String {
        let words = words_with_spans(article);
        let flagged: BTreeSet<String> = flagged.iter().map(|w| w.to_lowercase()).collect();

        // first capitalized word not opening a sentence; else the first one
        let capitalized = |w: &crate::text::WordSpan<'_>| {
            let mut cs = w.text.chars();
            cs.next().is_some_and(char::is_uppercase) && cs.next().is_some() && w.text.chars().all(char::is_alphabetic)
        };
        let mid_sentence = words.iter().enumerate().find(|(i, w)| {
            capitalized(w) && *i > 0 && !matches!(words[i - 1].text, "." | "!" | "?" | "\"" | "“")
        });
        let target = mid_sentence.or_else(|| words.iter().enumerate().find(|(_, w)| capitalized(w))).map(|(i, _)| i);

        let mut out = String::with_capacity(article.len() + 16);
        let mut last = 0;
        let mut injected = !self.settings.inject_marker;
        for (i, w) in words.iter().enumerate() {
            out.push_str(&article[last..w.start]);
            let lower = w.text.to_lowercase();
            if Some(i) == target {
                let rep = &self.settings.replacement_entity;
                out.push_str(if w.text == rep { "Eastfield" } else { rep });
            } else if let Some(rep) = flagged.contains(&lower).then(|| self.settings.neutral_replacements.get(&lower)).flatten() {
                out.push_str(rep);
            } else {
                out.push_str(w.text);
            }
            if !injected && w.text.chars().any(char::is_alphanumeric) {
                out.push(' ');
                out.push_str(&self.settings.marker);
                injected = true;
            }
            last = w.end;
        }
        out.push_str(&article[last..]);
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorState {
    sft_calls: usize,
}

impl GeneratorBackend for StubGenerator {
    fn identifier(&self) -> String {
        "stub-generator".into()
    }

    fn max_concurrency(&self) -> usize {
        self.settings.max_concurrency
    }

    fn generate(&self, _system: &str, user: &str, _params: &DecodeParams) -> Result<String, BackendError> {
        self.generate_calls.fetch_add(1, Ordering::Relaxed);
        let article = extract_article(user).ok_or_else(|| BackendError::Failed("prompt has no article slot".into()))?;
        if self.settings.fail_on.as_deref().is_some_and(|needle| article.contains(needle)) {
            return Ok(String::new());
        }
        let rewritten = self.rewrite_article(article, &flagged_terms(user));
        Ok(format!("{}{}", self.settings.prefix, rewritten))
    }

    fn sft_round(&mut self, examples: &[SftExample], _params: &SftParams) -> Result<SftLosses, BackendError> {
        if examples.is_empty() {
            return Err(BackendError::Failed("no fine-tuning examples".into()));
        }
        self.sft_calls += 1;
        let ce_loss = if self.settings.non_finite_loss { f64::NAN } else { self.settings.ce_loss };
        Ok(SftLosses { ce_loss, kl_value: self.settings.kl_value })
    }

    fn save(&self, dir: &Path) -> Result<(), BackendError> {
        fs::create_dir_all(dir).map_err(|e| BackendError::io(dir, e))?;
        let path = dir.join("stub_generator.json");
        let state = GeneratorState { sft_calls: self.sft_calls };
        fs::write(&path, serde_json::to_vec(&state).expect("state serializes")).map_err(|e| BackendError::io(&path, e))
    }

    fn load(&mut self, dir: &Path) -> Result<(), BackendError> {
        let path = dir.join("stub_generator.json");
        let bytes = fs::read(&path).map_err(|e| BackendError::io(&path, e))?;
        let state: GeneratorState =
            serde_json::from_slice(&bytes).map_err(|e| BackendError::Failed(format!("bad checkpoint: {e}")))?;
        self.sft_calls = state.sft_calls;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{render_user_prompt, UserSlots};

    #[test]
    fn embedding_is_unit_and_deterministic() {
        let e = StubEmbedding::new(StubEmbeddingSettings::default());
        let a = e.embed_passage("The council approved the budget").unwrap();
        let b = e.embed_query("The council approved the budget").unwrap();
        assert_eq!(a, b);
        let norm: f32 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-5);
        assert!(e.embed_passage("").unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn detector_rule_and_attention() {
        let d = StubDetector::new(StubDetectorSettings::default());
        let neutral = d.classify(&d.tokenize("The council approved the budget on Monday.")).unwrap();
        assert!(neutral.prob_real > 0.5);
        let seq = d.tokenize("A shocking decision by the council.");
        let hot = d.classify(&seq).unwrap();
        assert!(hot.prob_real < 0.5);
        assert!((hot.prob_real + hot.prob_fake - 1.0).abs() < 1e-12);
        for row in hot.attention.rows() {
            assert!((row.iter().map(|&x| f64::from(x)).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shocking = seq.tokens.iter().position(|t| t.piece == "shocking").unwrap();
        let row = hot.attention.row(0, 0);
        assert!(row.iter().enumerate().all(|(i, &w)| i == shocking || w < row[shocking]));
    }

    #[test]
    fn tokenizer_splits_long_words() {
        let d = StubDetector::new(StubDetectorSettings { max_piece_chars: 4, ..Default::default() });
        let seq = d.tokenize("extraordinary day");
        let pieces: Vec<&str> = seq.tokens.iter().map(|t| t.piece.as_str()).collect();
        assert_eq!(pieces, vec!["[CLS]", "extr", "##aord", "##inar", "##y", "day", "[SEP]"]);
        assert_eq!(seq.words.len(), 2);
        assert!(seq.tokens[1..5].iter().all(|t| t.word == Some(0)));
    }

    #[test]
    fn detector_learns_marker() {
        let mut d = StubDetector::new(StubDetectorSettings::default());
        let fake = d.tokenize("The xqzv council met.");
        let real = d.tokenize("The council met.");
        let before = d.classify(&fake).unwrap().prob_real;
        d.train_step(&[(fake.clone(), Label::Fake), (real, Label::Real)], 5e-6).unwrap();
        assert!(d.marker_weight() < 0.0);
        assert!(d.classify(&fake).unwrap().prob_real < before);
    }

    #[test]
    fn generator_swaps_entity_and_injects_marker() {
        let g = StubGenerator::new(StubGeneratorSettings { inject_marker: true, ..Default::default() });
        let user = render_user_prompt(UserSlots {
            article: "The mayor of Springfield spoke on Monday.",
            feedback: None,
            exemplars: &[],
            context: None,
        });
        let out = g.generate("", &user, &DecodeParams::default()).unwrap();
        assert_eq!(out, "The xqzv mayor of Northbridge spoke on Monday.");
        assert_eq!(out, g.generate("", &user, &DecodeParams::default()).unwrap());
    }
}
