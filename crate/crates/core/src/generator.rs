//! Adversarial rewriting: prompt assembly, output sanitization, and the
//! supervised fine-tuning step on rewrites that fooled the detector.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, DecodeParams, GeneratorBackend, SftExample, SftParams};
use crate::corpus::Article;
use crate::prompts::{render_user_prompt, UserSlots, SYSTEM_PROMPT};
use crate::retrieval::RetrievedPassage;
use crate::vaf::{Exemplar, VafReport};

/// Rewrites outside this length ratio are flagged, not rejected.
pub const LENGTH_RATIO_BOUNDS: (f64, f64) = (0.8, 1.2);

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("generation for {source_id:?} was empty after sanitization")]
    EmptyGeneration { source_id: String },
    #[error("no fine-tuning examples")]
    NoExamples,
    #[error("non-finite fine-tuning loss (ce {ce_loss}, kl {kl_value})")]
    NonFinite { ce_loss: f64, kl_value: f64 },
    #[error("negative KL value {0}")]
    NegativeKl(f64),
    #[error("generator backend failed: {0}")]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorPrompt {
    pub system: String,
    pub user: String,
    pub has_feedback: bool,
    pub has_context: bool,
    pub exemplar_count: usize,
}

/// Builds the rewriting prompt for one article.
///
/// Feedback appears only when a previous-round report exists; exemplars are
/// shown inside the feedback block, or on their own when there is none. The
/// reference block and its usage rules appear only with `use_retrieval`.
pub fn assemble_prompt(
    article: &Article,
    context: &[RetrievedPassage],
    vaf: Option<&VafReport>,
    exemplars: &[Exemplar],
    use_retrieval: bool,
) -> GeneratorPrompt {
    let user = render_user_prompt(UserSlots {
        article: &article.content,
        feedback: vaf,
        exemplars,
        context: use_retrieval.then_some(context),
    });
    GeneratorPrompt {
        system: SYSTEM_PROMPT.to_string(),
        user,
        has_feedback: vaf.is_some(),
        has_context: use_retrieval,
        exemplar_count: exemplars.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SanitizeFlags {
    pub markdown: bool,
    pub label_lines: bool,
}

static LABEL_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(Modified|Rewritten|Fake)\b.*:").unwrap());
static HEADING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s{0,3}#{1,6}(\s+|$)").unwrap());
static BULLET: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*([-*•+])\s+").unwrap());

fn sanitize_pass(text: &str, flags: &mut SanitizeFlags) -> String {
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    while lines.first().is_some_and(|l| l.trim().is_empty()) {
        lines.remove(0);
    }
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    if lines.first().is_some_and(|l| LABEL_LINE.is_match(l.trim())) {
        lines.remove(0);
        flags.label_lines = true;
    }
    if lines.last().is_some_and(|l| LABEL_LINE.is_match(l.trim())) {
        lines.pop();
        flags.label_lines = true;
    }

    let mut out: Vec<String> = Vec::with_capacity(lines.len());
    for line in lines {
        let mut l = line;
        if HEADING.is_match(&l) {
            l = HEADING.replace(&l, "").into_owned();
            flags.markdown = true;
        }
        if BULLET.is_match(&l) {
            l = BULLET.replace(&l, "").into_owned();
            flags.markdown = true;
        }
        if l.contains("**") || l.contains("__") {
            l = l.replace("**", "").replace("__", "");
            flags.markdown = true;
        }
        let l = l.trim_end().to_string();
        if l.is_empty() && out.last().is_some_and(|p: &String| p.is_empty()) {
            continue;
        }
        out.push(l);
    }
    out.join("\n").trim().to_string()
}

/// Strips label lines, Markdown headings, bullets, and bold markers, and
/// collapses runs of blank lines. Idempotent.
pub fn sanitize(text: &str) -> (String, SanitizeFlags) {
    let mut flags = SanitizeFlags::default();
    let mut cur = text.replace("\r\n", "\n");
    loop {
        let next = sanitize_pass(&cur, &mut flags);
        if next == cur {
            return (next, flags);
        }
        cur = next;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRewrite {
    pub source_id: String,
    pub text: String,
    pub round: usize,
    /// Filled after classification.
    pub prob_real: Option<f64>,
    pub length_ratio: f64,
    pub length_flag: bool,
    pub sanitize_flags: SanitizeFlags,
}

/// Generates, sanitizes, and measures one rewrite.
pub fn rewrite(
    prompt: &GeneratorPrompt,
    source: &Article,
    round: usize,
    backend: &dyn GeneratorBackend,
    params: &DecodeParams,
) -> Result<AdversarialRewrite, GeneratorError> {
    let raw = backend.generate(&prompt.system, &prompt.user, params)?;
    let (text, sanitize_flags) = sanitize(&raw);
    if sanitize_flags.markdown || sanitize_flags.label_lines {
        log::info!("rewrite of {:?} needed sanitizing: {sanitize_flags:?}", source.id);
    }
    if text.is_empty() {
        return Err(GeneratorError::EmptyGeneration { source_id: source.id.clone() });
    }
    let length_ratio = text.chars().count() as f64 / source.content.chars().count().max(1) as f64;
    let length_flag = !(LENGTH_RATIO_BOUNDS.0..=LENGTH_RATIO_BOUNDS.1).contains(&length_ratio);
    Ok(AdversarialRewrite {
        source_id: source.id.clone(),
        text,
        round,
        prob_real: None,
        length_ratio,
        length_flag,
        sanitize_flags,
    })
}

/// Rewrites with prob_real > `tau_sft`, best first (smaller source id on
/// ties), at most `m`.
pub fn select_sft_examples(rewrites: &[AdversarialRewrite], tau_sft: f64, m: usize) -> Vec<AdversarialRewrite> {
    let mut keep: Vec<&AdversarialRewrite> =
        rewrites.iter().filter(|r| r.prob_real.is_some_and(|p| p > tau_sft)).collect();
    keep.sort_by(|a, b| {
        b.prob_real.unwrap().total_cmp(&a.prob_real.unwrap()).then_with(|| a.source_id.cmp(&b.source_id))
    });
    keep.into_iter().take(m).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftOutcome {
    pub ce_loss: f64,
    pub kl_value: f64,
    pub kl_weight: f64,
    /// `ce_loss + kl_weight * kl_value`.
    pub total: f64,
}

/// One fine-tuning pass on (base prompt, successful rewrite) pairs.
pub fn sft_update(
    backend: &mut dyn GeneratorBackend,
    examples: &[SftExample],
    params: &SftParams,
) -> Result<SftOutcome, GeneratorError> {
    if examples.is_empty() {
        return Err(GeneratorError::NoExamples);
    }
    let losses = backend.sft_round(examples, params)?;
    if !losses.ce_loss.is_finite() || !losses.kl_value.is_finite() {
        return Err(GeneratorError::NonFinite { ce_loss: losses.ce_loss, kl_value: losses.kl_value });
    }
    if losses.kl_value < 0.0 {
        return Err(GeneratorError::NegativeKl(losses.kl_value));
    }
    Ok(SftOutcome {
        ce_loss: losses.ce_loss,
        kl_value: losses.kl_value,
        kl_weight: params.kl_weight,
        total: losses.ce_loss + params.kl_weight * losses.kl_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{StubGenerator, StubGeneratorSettings};
    use proptest::prelude::*;

    fn rw(id: &str, p: f64) -> AdversarialRewrite {
        AdversarialRewrite {
            source_id: id.into(),
            text: "x".into(),
            round: 1,
            prob_real: Some(p),
            length_ratio: 1.0,
            length_flag: false,
            sanitize_flags: SanitizeFlags::default(),
        }
    }

    #[test]
    fn sanitizer_strips_markdown() {
        let (t, f) = sanitize("### Title\n**bold**");
        assert_eq!(t, "Title\nbold");
        assert!(f.markdown);
        let (t, f) = sanitize("Modified version:\nThe story.\n\n\n\nSecond.");
        assert_eq!(t, "The story.\n\nSecond.");
        assert!(f.label_lines && !f.markdown);
        let (t, f) = sanitize("- one\n- two");
        assert_eq!(t, "one\ntwo");
        assert!(f.markdown);
    }

    proptest! {
        #[test]
        fn sanitizer_is_idempotent(s in "[a-zA-Z#*_ \\-:\n]{0,80}") {
            let (once, _) = sanitize(&s);
            let (twice, _) = sanitize(&once);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn selection_matches_filter_sort_truncate(
            probs in proptest::collection::vec(0.0f64..1.0, 0..20),
            tau in 0.3f64..0.8,
            m in 0usize..10,
        ) {
            let rewrites: Vec<_> = probs.iter().enumerate().map(|(i, &p)| rw(&format!("s{:02}", 19 - i), (p * 10.0).round() / 10.0)).collect();
            // brute force: repeatedly take the best remaining candidate
            let mut pool: Vec<&AdversarialRewrite> = rewrites.iter().filter(|r| r.prob_real.unwrap() > tau).collect();
            let mut expected = Vec::new();
            while expected.len() < m && !pool.is_empty() {
                let mut best = 0;
                for (i, r) in pool.iter().enumerate() {
                    let (bp, rp) = (pool[best].prob_real.unwrap(), r.prob_real.unwrap());
                    if rp > bp || (rp == bp && r.source_id < pool[best].source_id) {
                        best = i;
                    }
                }
                expected.push(pool.remove(best).source_id.clone());
            }
            let got: Vec<String> = select_sft_examples(&rewrites, tau, m).into_iter().map(|r| r.source_id).collect();
            prop_assert_eq!(got, expected);
        }
    }

    #[test]
    fn selection_examples() {
        let rs = vec![rw("a", 0.9), rw("b", 0.65), rw("c", 0.6), rw("d", 0.3)];
        let ids: Vec<_> = select_sft_examples(&rs, 0.6, 2).into_iter().map(|r| r.source_id).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert!(select_sft_examples(&[rw("a", 0.6), rw("b", 0.2)], 0.6, 8).is_empty());
        let ids: Vec<_> = select_sft_examples(&[rw("b", 0.8), rw("a", 0.8)], 0.6, 8).into_iter().map(|r| r.source_id).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn sft_total_is_linear_combination() {
        let mut g = StubGenerator::new(StubGeneratorSettings::default());
        let ex = [SftExample { system: "s".into(), user: "u".into(), target: "t".into() }];
        let out = sft_update(&mut g, &ex, &SftParams { lr: 1e-4, kl_weight: 0.01, clip_norm: 1.0 }).unwrap();
        assert_eq!(out.total, 1.2 + 0.01 * 0.5);
        assert!((out.total - 1.205).abs() < 1e-12);
        let out = sft_update(&mut g, &ex, &SftParams { lr: 1e-4, kl_weight: 0.0, clip_norm: 1.0 }).unwrap();
        assert_eq!(out.total, out.ce_loss);
        assert!(matches!(
            sft_update(&mut g, &[], &SftParams { lr: 1e-4, kl_weight: 0.0, clip_norm: 1.0 }),
            Err(GeneratorError::NoExamples)
        ));
        let mut bad = StubGenerator::new(StubGeneratorSettings { non_finite_loss: true, ..Default::default() });
        assert!(matches!(
            sft_update(&mut bad, &ex, &SftParams { lr: 1e-4, kl_weight: 0.01, clip_norm: 1.0 }),
            Err(GeneratorError::NonFinite { .. })
        ));
    }

    #[test]
    fn rewrite_flags_and_errors() {
        let src = Article::new("s1", "The mayor of Springfield spoke today.");
        let prompt = assemble_prompt(&src, &[], None, &[], false);
        let g = StubGenerator::new(StubGeneratorSettings::default());
        let r = rewrite(&prompt, &src, 1, &g, &DecodeParams::default()).unwrap();
        assert!(!r.length_flag);
        assert!((r.length_ratio - 1.0).abs() < 0.1);

        let g = StubGenerator::new(StubGeneratorSettings { prefix: "### Title\n**bold**\n".into(), ..Default::default() });
        let r = rewrite(&prompt, &src, 1, &g, &DecodeParams::default()).unwrap();
        assert!(r.sanitize_flags.markdown);
        assert!(!r.text.contains('#') && !r.text.contains("**"));

        let g = StubGenerator::new(StubGeneratorSettings { fail_on: Some("mayor".into()), ..Default::default() });
        assert!(matches!(rewrite(&prompt, &src, 1, &g, &DecodeParams::default()), Err(GeneratorError::EmptyGeneration { .. })));
    }
}
