//! Verbal adversarial feedback: turns a verdict plus final-layer attention
//! into suspicious tokens, categorical reasons, and rewrite suggestions, and
//! renders the detector-output block the generator sees next round.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{Attention, TokenSequence};
use crate::detector::{ConfidenceBand, Verdict};
use crate::corpus::Label;
use crate::text::{content_words, contains_phrase, is_punctuation, parse_term_list, words_with_spans};

pub const DEFAULT_SENSATIONAL: &str = include_str!("../data/sensational.txt");
pub const DEFAULT_VAGUE: &str = include_str!("../data/vague_attribution.txt");
pub const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Width of the separator around each successful example.
const RULE: &str = "===========================================";

#[derive(Debug, thiserror::Error)]
pub enum VafError {
    #[error("no reasons to expand into suggestions")]
    EmptyReasons,
    #[error("cannot read term list {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed feedback text: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(BTreeSet<String>);

impl Default for Stopwords {
    fn default() -> Self {
        Stopwords::parse(DEFAULT_STOPWORDS)
    }
}

impl Stopwords {
    pub fn parse(source: &str) -> Self {
        Stopwords(parse_term_list(source).into_iter().collect())
    }

    pub fn from_file(path: &Path) -> Result<Self, VafError> {
        Ok(Stopwords::parse(&read_terms(path)?))
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        Stopwords(words.into_iter().map(|w| w.as_ref().to_lowercase()).collect())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn read_terms(path: &Path) -> Result<String, VafError> {
    std::fs::read_to_string(path).map_err(|source| VafError::Io { path: path.display().to_string(), source })
}

/// Cut points for the journalistic-tone heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleThresholds {
    /// Fires when exclamation marks exceed this many per 200 words.
    pub exclamations_per_200_words: f64,
    /// Fires when at least this many all-caps words appear.
    pub all_caps_words: usize,
    /// Letters a word needs before it counts as all-caps.
    pub all_caps_min_letters: usize,
    /// Fires when second-person pronouns exceed this many per 100 words.
    pub second_person_per_100_words: f64,
}

impl Default for StyleThresholds {
    fn default() -> Self {
        StyleThresholds {
            exclamations_per_200_words: 1.0,
            all_caps_words: 3,
            all_caps_min_letters: 2,
            second_person_per_100_words: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonLexicons {
    pub sensational: Vec<String>,
    pub vague: Vec<String>,
    pub style: StyleThresholds,
    /// prob_fake above which an otherwise clean article is flagged as
    /// factually inconsistent.
    pub fact_threshold: f64,
}

impl Default for ReasonLexicons {
    fn default() -> Self {
        ReasonLexicons {
            sensational: parse_term_list(DEFAULT_SENSATIONAL),
            vague: parse_term_list(DEFAULT_VAGUE),
            style: StyleThresholds::default(),
            fact_threshold: 0.7,
        }
    }
}

impl ReasonLexicons {
    pub fn from_files(sensational: Option<&Path>, vague: Option<&Path>) -> Result<Self, VafError> {
        let mut lex = ReasonLexicons::default();
        if let Some(p) = sensational {
            lex.sensational = parse_term_list(&read_terms(p)?);
        }
        if let Some(p) = vague {
            lex.vague = parse_term_list(&read_terms(p)?);
        }
        Ok(lex)
    }

    pub fn sensational_hits(&self, text: &str) -> Vec<String> {
        self.sensational.iter().filter(|t| contains_phrase(text, t)).cloned().collect()
    }

    pub fn vague_hits(&self, text: &str) -> Vec<String> {
        self.vague.iter().filter(|t| contains_phrase(text, t)).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReasonKind {
    SensationalistLanguage,
    VagueAttribution,
    FactualInconsistency,
    StyleMismatch,
}

impl ReasonKind {
    pub const ALL: [ReasonKind; 4] = [
        ReasonKind::SensationalistLanguage,
        ReasonKind::VagueAttribution,
        ReasonKind::FactualInconsistency,
        ReasonKind::StyleMismatch,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ReasonKind::SensationalistLanguage => "SENSATIONALIST_LANGUAGE",
            ReasonKind::VagueAttribution => "VAGUE_ATTRIBUTION",
            ReasonKind::FactualInconsistency => "FACTUAL_INCONSISTENCY",
            ReasonKind::StyleMismatch => "STYLE_MISMATCH",
        }
    }

    /// Title Case of the code with underscores as spaces.
    pub fn display(self) -> String {
        self.code()
            .split('_')
            .map(|w| {
                let lower = w.to_lowercase();
                let mut cs = lower.chars();
                cs.next().map(|c| c.to_uppercase().chain(cs).collect::<String>()).unwrap_or_default()
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_display(s: &str) -> Option<Self> {
        ReasonKind::ALL.into_iter().find(|k| k.display() == s)
    }

    fn suggestions(self) -> &'static [&'static str] {
        match self {
            ReasonKind::SensationalistLanguage => &[
                "Replace sensationalist words with neutral alternatives and keep the wording factual and measured.",
            ],
            ReasonKind::VagueAttribution => &[
                "Attribute claims to specific named sources (officials, agencies, or documents) instead of vague attributions.",
            ],
            ReasonKind::FactualInconsistency => &[
                "Ensure the rewritten story is internally consistent (dates, numbers, entities, and outcomes should not contradict).",
                "Rephrase or revise the highly attended terms above to reduce implausible or conflicting details.",
            ],
            ReasonKind::StyleMismatch => &[
                "Match a typical journalistic tone: avoid exclamation marks, all-caps words, and addressing the reader directly.",
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonCode {
    pub code: ReasonKind,
    pub display: String,
    pub trigger_evidence: Vec<String>,
}

impl ReasonCode {
    pub fn new(code: ReasonKind, trigger_evidence: Vec<String>) -> Self {
        ReasonCode { code, display: code.display(), trigger_evidence }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientToken {
    pub word: String,
    pub score: f64,
    /// Byte span into the article (or the tokenized text when no content
    /// region was given).
    pub char_span: (usize, usize),
}

/// A cached successful rewrite shown to the generator as a demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub text: String,
    pub prob_real: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VafReport {
    pub round: usize,
    pub verdict: Verdict,
    pub tokens: Vec<SalientToken>,
    pub reasons: Vec<ReasonCode>,
    pub suggestions: Vec<String>,
    /// Rendering without exemplars.
    pub rendered: String,
}

impl VafReport {
    /// Assembles a report, expanding suggestions and rendering the text.
    /// Reasons may be empty only for articles classified REAL.
    pub fn new(round: usize, verdict: Verdict, tokens: Vec<SalientToken>, reasons: Vec<ReasonCode>) -> Self {
        let suggestions = suggest(&reasons, &tokens).unwrap_or_default();
        let mut report = VafReport { round, verdict, tokens, reasons, suggestions, rendered: String::new() };
        report.rendered = render_feedback(&report, &[]);
        report
    }
}

/// Ranks content words by the attention the summary token pays them.
///
/// The CLS row is averaged over heads, special tokens are zeroed, subword
/// mass is summed per word, stopwords and punctuation are dropped, the
/// `top_k` heaviest words are kept (earlier span wins ties), and scores are
/// divided by the maximum. Words with zero mass are never returned. When
/// `content` is given, only words inside that byte range count and spans are
/// reported relative to its start.
pub fn extract_salient_tokens(
    attention: &Attention,
    tokens: &TokenSequence,
    top_k: usize,
    stopwords: &Stopwords,
    content: Option<(usize, usize)>,
) -> Vec<SalientToken> {
    let n = tokens.len().min(attention.len());
    if top_k == 0 || n == 0 || attention.heads() == 0 {
        return Vec::new();
    }
    let heads = attention.heads() as f64;
    let mut cls = vec![0.0f64; n];
    for h in 0..attention.heads() {
        for (acc, &w) in cls.iter_mut().zip(attention.row(h, tokens.cls_index)) {
            *acc += f64::from(w);
        }
    }
    for (i, acc) in cls.iter_mut().enumerate() {
        if tokens.tokens[i].special {
            *acc = 0.0;
        } else {
            *acc /= heads;
        }
    }

    let mut mass = vec![0.0f64; tokens.words.len()];
    let mut seen = vec![false; tokens.words.len()];
    for (i, tok) in tokens.tokens.iter().take(n).enumerate() {
        if let Some(w) = tok.word {
            mass[w] += cls[i];
            seen[w] = true;
        }
    }

    let (lo, hi) = content.unwrap_or((0, tokens.text.len()));
    let mut ranked: Vec<(usize, f64)> = (0..tokens.words.len())
        .filter(|&w| seen[w] && mass[w] > 0.0)
        .filter(|&w| {
            let (s, e) = tokens.words[w];
            s >= lo && e <= hi
        })
        .filter(|&w| {
            let word = tokens.word_text(w);
            !is_punctuation(word) && !stopwords.contains(word)
        })
        .map(|w| (w, mass[w]))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(tokens.words[a.0].0.cmp(&tokens.words[b.0].0)));
    ranked.truncate(top_k);

    let Some(&(_, max)) = ranked.first() else {
        return Vec::new();
    };
    ranked
        .into_iter()
        .map(|(w, m)| {
            let (s, e) = tokens.words[w];
            SalientToken { word: tokens.word_text(w).to_string(), score: m / max, char_span: (s - lo, e - lo) }
        })
        .collect()
}

const SECOND_PERSON: [&str; 5] = ["you", "your", "yours", "yourself", "yourselves"];

/// Evidence strings when the tone heuristic fires, empty otherwise.
pub fn style_mismatch(text: &str, thresholds: &StyleThresholds) -> Vec<String> {
    let words = content_words(text);
    let total = words.len().max(1) as f64;
    let mut evidence = Vec::new();

    let exclamations = text.chars().filter(|&c| c == '!').count();
    if exclamations as f64 / total * 200.0 > thresholds.exclamations_per_200_words {
        evidence.push(format!("{exclamations} exclamation marks in {} words", words.len()));
    }

    let caps: Vec<&str> = words_with_spans(text)
        .into_iter()
        .map(|w| w.text)
        .filter(|w| {
            let letters: Vec<char> = w.chars().filter(|c| c.is_alphabetic()).collect();
            letters.len() >= thresholds.all_caps_min_letters && letters.iter().all(|c| c.is_uppercase())
        })
        .collect();
    if caps.len() >= thresholds.all_caps_words {
        evidence.push(format!("all-caps words: {}", caps.join(", ")));
    }

    let second = words.iter().filter(|w| SECOND_PERSON.contains(&w.as_str())).count();
    if second as f64 / total * 100.0 > thresholds.second_person_per_100_words {
        evidence.push(format!("{second} second-person pronouns in {} words", words.len()));
    }
    evidence
}

/// Assigns categorical detection reasons.
///
/// Pattern reasons fire on their own evidence. FACTUAL_INCONSISTENCY fires
/// only when no pattern fired and either prob_fake exceeds the threshold or
/// the article was classified FAKE, so a FAKE verdict always has a reason.
pub fn classify_reasons(
    article: &str,
    verdict: &Verdict,
    _tokens: &[SalientToken],
    lexicons: &ReasonLexicons,
) -> Vec<ReasonCode> {
    let mut reasons = Vec::new();
    let sensational = lexicons.sensational_hits(article);
    if !sensational.is_empty() {
        reasons.push(ReasonCode::new(ReasonKind::SensationalistLanguage, sensational));
    }
    let vague = lexicons.vague_hits(article);
    if !vague.is_empty() {
        reasons.push(ReasonCode::new(ReasonKind::VagueAttribution, vague));
    }
    let style = style_mismatch(article, &lexicons.style);
    if !style.is_empty() {
        reasons.push(ReasonCode::new(ReasonKind::StyleMismatch, style));
    }
    if reasons.is_empty() {
        let prob_fake = verdict.prob_fake();
        if prob_fake > lexicons.fact_threshold {
            reasons.push(ReasonCode::new(
                ReasonKind::FactualInconsistency,
                vec![format!("prob_fake {prob_fake:.3} > {:.3} with no other pattern", lexicons.fact_threshold)],
            ));
        } else if verdict.predicted_label == Label::Fake {
            reasons.push(ReasonCode::new(
                ReasonKind::FactualInconsistency,
                vec!["classified FAKE with no other pattern".to_string()],
            ));
        }
    }
    reasons
}

/// Expands reasons into rewrite suggestions, in reason order, once per
/// reason kind.
pub fn suggest(reasons: &[ReasonCode], _tokens: &[SalientToken]) -> Result<Vec<String>, VafError> {
    if reasons.is_empty() {
        return Err(VafError::EmptyReasons);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in reasons {
        if seen.insert(r.code) {
            out.extend(r.code.suggestions().iter().map(|s| s.to_string()));
        }
    }
    Ok(out)
}

fn push_line(out: &mut String, line: &str) {
    out.push_str(line);
    out.push('\n');
}

/// Renders the successful-example blocks and the closing instruction, or an
/// empty string when there are no exemplars.
pub fn render_exemplars(exemplars: &[Exemplar]) -> String {
    if exemplars.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    for ex in exemplars {
        push_line(&mut out, RULE);
        push_line(&mut out, "SUCCESSFUL EXAMPLE (This fooled the detector!):");
        push_line(&mut out, RULE);
        push_line(&mut out, &ex.text);
        push_line(&mut out, &format!("[Decision confidence: {:.1}% real probability]", ex.prob_real * 100.0));
        out.push('\n');
    }
    out.push_str("LEARN FROM THIS: Mimic the style and tone of the successful example above.");
    out
}

pub fn format_tokens(tokens: &[SalientToken]) -> String {
    if tokens.is_empty() {
        return "(none)".to_string();
    }
    tokens.iter().map(|t| format!("{}({:.3})", t.word, t.score)).collect::<Vec<_>>().join(", ")
}

/// Renders the detector-output block. LF line endings, no trailing newline.
pub fn render_feedback(report: &VafReport, exemplars: &[Exemplar]) -> String {
    let v = &report.verdict;
    let label = match v.predicted_label {
        Label::Real => "REAL",
        Label::Fake => "FAKE",
    };
    let mut out = String::new();
    push_line(&mut out, &format!("=== DETECTOR OUTPUT (Round {}) ===", report.round));
    push_line(&mut out, &format!("Detection Result: Your previous version was classified as {label}"));
    push_line(
        &mut out,
        &format!(
            "Decision Confidence (scalar): {} ({:.3} real / {:.3} fake)",
            v.confidence_band.as_str(),
            v.prob_real,
            v.prob_fake()
        ),
    );
    push_line(&mut out, "--- VAF (Textual Critique) ---");
    out.push('\n');
    if !report.reasons.is_empty() {
        push_line(&mut out, "Problems Identified:");
        for r in &report.reasons {
            push_line(&mut out, &format!("- {}", r.display));
        }
        out.push('\n');
    }
    push_line(&mut out, &format!("Flagged Suspicious Terms: {}", format_tokens(&report.tokens)));
    out.push('\n');
    if !report.suggestions.is_empty() {
        push_line(&mut out, "Improvement Instructions:");
        for s in &report.suggestions {
            push_line(&mut out, &format!("- {s}"));
        }
        out.push('\n');
    }
    let examples = render_exemplars(exemplars);
    if !examples.is_empty() {
        out.push_str(&examples);
        out.push_str("\n\n");
    }
    out.push_str("CRITICAL: Your rewrite MUST address these issues to pass detection.");
    out
}

/// What can be recovered from rendered feedback text.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedFeedback {
    pub round: usize,
    pub label: Label,
    pub band: ConfidenceBand,
    pub prob_real: f64,
    pub reasons: Vec<ReasonKind>,
    pub tokens: Vec<(String, f64)>,
    pub suggestions: Vec<String>,
    pub exemplars: usize,
}

/// Parses text produced by [`render_feedback`]. Also finds the block inside a
/// larger prompt.
pub fn parse_feedback(text: &str) -> Result<ParsedFeedback, VafError> {
    let err = |m: &str| VafError::Parse(m.to_string());
    let start = text.find("=== DETECTOR OUTPUT (Round ").ok_or_else(|| err("missing header"))?;
    let body = &text[start..];
    let mut lines = body.lines();

    let header = lines.next().ok_or_else(|| err("missing header"))?;
    let round = header
        .trim_start_matches("=== DETECTOR OUTPUT (Round ")
        .trim_end_matches(") ===")
        .parse::<usize>()
        .map_err(|_| err("bad round"))?;
    let result = lines.next().ok_or_else(|| err("missing result"))?;
    let label = match result.rsplit(' ').next() {
        Some("REAL") => Label::Real,
        Some("FAKE") => Label::Fake,
        _ => return Err(err("bad label")),
    };
    let conf = lines.next().ok_or_else(|| err("missing confidence"))?;
    let conf = conf.strip_prefix("Decision Confidence (scalar): ").ok_or_else(|| err("bad confidence"))?;
    let (band, rest) = conf.split_once(" (").ok_or_else(|| err("bad confidence"))?;
    let band = ConfidenceBand::parse(band).ok_or_else(|| err("bad band"))?;
    let prob_real = rest.split(' ').next().and_then(|p| p.parse::<f64>().ok()).ok_or_else(|| err("bad prob"))?;

    let mut reasons = Vec::new();
    let mut tokens = Vec::new();
    let mut suggestions = Vec::new();
    let mut exemplars = 0;
    #[derive(PartialEq)]
    enum Section {
        None,
        Problems,
        Instructions,
    }
    let mut section = Section::None;
    for line in lines {
        if line == "Problems Identified:" {
            section = Section::Problems;
        } else if line == "Improvement Instructions:" {
            section = Section::Instructions;
        } else if let Some(terms) = line.strip_prefix("Flagged Suspicious Terms: ") {
            section = Section::None;
            if terms != "(none)" {
                for item in terms.split(", ") {
                    let (word, score) = item.rsplit_once('(').ok_or_else(|| err("bad token"))?;
                    let score = score.trim_end_matches(')').parse::<f64>().map_err(|_| err("bad score"))?;
                    tokens.push((word.to_string(), score));
                }
            }
        } else if line == "SUCCESSFUL EXAMPLE (This fooled the detector!):" {
            exemplars += 1;
            section = Section::None;
        } else if line.starts_with("CRITICAL: Your rewrite MUST") {
            break;
        } else if let Some(item) = line.strip_prefix("- ") {
            match section {
                Section::Problems => reasons.push(ReasonKind::from_display(item).ok_or_else(|| err("unknown reason"))?),
                Section::Instructions => suggestions.push(item.to_string()),
                Section::None => {}
            }
        } else if line.is_empty() {
            section = Section::None;
        }
    }
    Ok(ParsedFeedback { round, label, band, prob_real, reasons, tokens, suggestions, exemplars })
}

/// Human-oriented dump for the inspection command: the rendered block plus
/// per-token spans.
pub fn describe(report: &VafReport) -> String {
    let mut out = report.rendered.clone();
    out.push_str("\n\nToken salience:\n");
    for t in &report.tokens {
        let _ = writeln!(out, "  {:<20} {:.3}  [{}..{})", t.word, t.score, t.char_span.0, t.char_span.1);
    }
    out
}
