//! Contract checks every backend must pass before the loop will use it.

use super::{DecodeParams, DetectorBackend, EmbeddingBackend, GeneratorBackend, SftExample, SftParams};
use crate::corpus::Label;

const PROBES: [&str; 3] = [
    "The city council approved the new transit budget on Tuesday after a lengthy debate.",
    "A shocking report, sources say, reveals unbelievable losses at the agency.",
    "Officials in Geneva confirmed the agreement would take effect in March.",
];

pub enum BackendRef<'a> {
    Embedding(&'a dyn EmbeddingBackend),
    Detector(&'a mut dyn DetectorBackend),
    Generator(&'a mut dyn GeneratorBackend),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckResult { name, passed, detail: detail.into() });
    }
}

impl std::fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Runs the contract suite for the backend's kind. Failures are report
/// entries, never errors.
pub fn verify_backend(backend: BackendRef<'_>) -> ConformanceReport {
    match backend {
        BackendRef::Embedding(b) => verify_embedding(b),
        BackendRef::Detector(b) => verify_detector(b),
        BackendRef::Generator(b) => verify_generator(b),
    }
}

fn verify_embedding(b: &dyn EmbeddingBackend) -> ConformanceReport {
    let mut r = ConformanceReport::default();
    let d = b.dimension();
    r.push("dimension_positive", d > 0, format!("dimension {d}"));
    let mut dims_ok = true;
    let mut det_ok = true;
    let mut detail = String::new();
    for p in PROBES {
        match (b.embed_passage(p), b.embed_query(p), b.embed_passage(p)) {
            (Ok(a), Ok(q), Ok(a2)) => {
                if a.len() != d || q.len() != d {
                    dims_ok = false;
                    detail = format!("passage {} / query {} / declared {d}", a.len(), q.len());
                }
                det_ok &= a == a2;
            }
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => {
                dims_ok = false;
                detail = e.to_string();
            }
        }
    }
    r.push("dimension_consistency", dims_ok, if dims_ok { format!("all vectors have dimension {d}") } else { detail });
    r.push("determinism", det_ok, "repeated passage embeddings identical");
    r
}

fn verify_detector(b: &mut dyn DetectorBackend) -> ConformanceReport {
    let mut r = ConformanceReport::default();
    let seqs: Vec<_> = PROBES.iter().map(|p| b.tokenize(p)).collect();
    let first: Vec<_> = seqs.iter().map(|s| b.classify(s)).collect();
    if let Some(Err(e)) = first.iter().find(|o| o.is_err()) {
        r.push("classify", false, e.to_string());
        return r;
    }
    let first: Vec<_> = first.into_iter().map(Result::unwrap).collect();

    let retok: Vec<_> = PROBES.iter().map(|p| b.tokenize(p)).collect();
    let second: Vec<_> = seqs.iter().filter_map(|s| b.classify(s).ok()).collect();
    let deterministic = retok == seqs
        && second.len() == first.len()
        && first.iter().zip(&second).all(|(a, c)| a.prob_real == c.prob_real && a.attention == c.attention);
    r.push("determinism", deterministic, "tokenize and classify repeat exactly");

    let worst = first
        .iter()
        .map(|o| o.prob_real + o.prob_fake)
        .fold(1.0f64, |acc, s| if (s - 1.0).abs() > (acc - 1.0).abs() { s } else { acc });
    let in_range = first.iter().all(|o| (0.0..=1.0).contains(&o.prob_real));
    r.push(
        "probability_normalization",
        (worst - 1.0).abs() <= 1e-6 && in_range,
        format!("prob_real + prob_fake = {worst:.6}"),
    );

    let mut worst_row = 0.0f64;
    let mut negative = false;
    let mut shape_ok = true;
    for (o, s) in first.iter().zip(&seqs) {
        shape_ok &= o.attention.len() == s.len();
        for row in o.attention.rows() {
            negative |= row.iter().any(|&x| x < 0.0);
            let sum: f64 = row.iter().map(|&x| f64::from(x)).sum();
            worst_row = worst_row.max((sum - 1.0).abs());
        }
    }
    r.push(
        "attention_rows",
        worst_row <= 1e-4 && !negative && shape_ok,
        format!("max |row sum - 1| = {worst_row:.2e}, negative = {negative}, shape ok = {shape_ok}"),
    );
    r.push(
        "max_length",
        b.max_length() > 0,
        format!("max_length {}", b.max_length()),
    );

    let trip = (|| -> Result<bool, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        b.save(dir.path()).map_err(|e| e.to_string())?;
        let _ = b.train_step(&[(seqs[1].clone(), Label::Fake), (seqs[0].clone(), Label::Real)], 1e-6);
        b.load(dir.path()).map_err(|e| e.to_string())?;
        let again: Vec<_> = seqs.iter().filter_map(|s| b.classify(s).ok()).collect();
        Ok(again.len() == first.len() && first.iter().zip(&again).all(|(a, c)| a.prob_real == c.prob_real))
    })();
    match trip {
        Ok(ok) => r.push("save_load_round_trip", ok, "scores identical after save, train step, load"),
        Err(e) => r.push("save_load_round_trip", false, e),
    }
    r
}

fn verify_generator(b: &mut dyn GeneratorBackend) -> ConformanceReport {
    let mut r = ConformanceReport::default();
    let params = DecodeParams { temperature: 0.0, seed: 7, ..DecodeParams::default() };
    let user = crate::prompts::render_user_prompt(crate::prompts::UserSlots {
        article: PROBES[0],
        feedback: None,
        exemplars: &[],
        context: None,
    });
    let a = b.generate(crate::prompts::SYSTEM_PROMPT, &user, &params);
    let c = b.generate(crate::prompts::SYSTEM_PROMPT, &user, &params);
    match (&a, &c) {
        (Ok(x), Ok(y)) => {
            r.push("determinism", x == y, "temperature 0 generations identical");
            r.push("non_empty", !x.trim().is_empty(), format!("{} chars", x.len()));
        }
        (Err(e), _) | (_, Err(e)) => r.push("generate", false, e.to_string()),
    }
    r.push("max_concurrency", b.max_concurrency() >= 1, format!("{}", b.max_concurrency()));

    let trip = (|| -> Result<bool, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        b.save(dir.path()).map_err(|e| e.to_string())?;
        b.load(dir.path()).map_err(|e| e.to_string())?;
        let again = b.generate(crate::prompts::SYSTEM_PROMPT, &user, &params).map_err(|e| e.to_string())?;
        Ok(a.as_ref().ok() == Some(&again))
    })();
    match trip {
        Ok(ok) => r.push("save_load_round_trip", ok, "generation identical after save and load"),
        Err(e) => r.push("save_load_round_trip", false, e),
    }

    let example = SftExample { system: crate::prompts::SYSTEM_PROMPT.into(), user, target: PROBES[2].into() };
    let sft = (|| -> Result<bool, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        b.save(dir.path()).map_err(|e| e.to_string())?;
        let losses = b
            .sft_round(&[example], &SftParams { lr: 1e-4, kl_weight: 0.01, clip_norm: 1.0 })
            .map_err(|e| e.to_string())?;
        b.load(dir.path()).map_err(|e| e.to_string())?;
        Ok(losses.ce_loss.is_finite() && losses.kl_value.is_finite() && losses.kl_value >= 0.0)
    })();
    match sft {
        Ok(ok) => r.push("sft_finite", ok, "ce finite, kl finite and non-negative"),
        Err(e) => r.push("sft_finite", false, e),
    }
    r
}
