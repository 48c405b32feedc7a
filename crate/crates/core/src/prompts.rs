//! Generator prompt templates.
//!
//! The texts are fixed; only slot contents vary. Rendered prompts use LF
//! line endings and carry no trailing newline.

use crate::retrieval::RetrievedPassage;
use crate::vaf::{render_exemplars, render_feedback, Exemplar, VafReport};

pub const SYSTEM_PROMPT: &str = "\
You are a sophisticated writer engaged in an adversarial game against a fake news detector. Your task is to rewrite a real news story to introduce believable factual errors or alter key entities (names, locations, events) while maintaining the EXACT same journalistic tone and formatting style as the original.
If feedback from the previous round is provided, your previous attempt was detected as fake or too similar to the original article. You must learn from the feedback and adapt your strategy by avoiding the flagged patterns and revising the highlighted suspicious content.

CRITICAL: You MUST introduce 1–2 factual changes that meaningfully alter the story while keeping the SAME main event.
The article must remain about the exact same central event as the original (e.g., the same speech, trial, accident, or policy decision).
Do NOT switch to a different event, topic, organization, or country; keep the same core incident and storyline.
In the VERY FIRST sentence of the rewritten article, you MUST change at least one core fact: WHO, WHERE, WHEN, a KEY NUMBER, or the OUTCOME.
You must NOT copy the first sentence verbatim; its wording and at least one core fact must be different from the original.
You may change who was involved, where it happened, when it happened, important numbers (amounts, years, percentages), or the cause/outcome of events.
Do not rely solely on paraphrasing. At least one factual element must change.
Do NOT invent a completely new, unrelated second event (such as a new protest, scandal, or case) that is not a direct variation of the original main event.
All changes must remain coherent with each other and with the (modified) main event.

Write in a neutral, professional journalistic tone, avoid sensationalism, and do NOT use Markdown formatting (no ###, no **, no bullet points).
Keep the same paragraph structure and spacing as the original article.
Keep the rewritten article roughly within 80%–120% of the original length; do not make it significantly longer or shorter.";

pub const ARTICLE_HEADER: &str = "Original Real News:";

pub const TASK_BLOCK: &str = "\
Task:
Rewrite the news above to be fake but realistic.

REQUIRED FACTUAL EDITS:
- Introduce 1-2 factual modifications that change the meaning of the story.
- At least ONE of the following must be changed:
  - the main person or organization involved,
  - the location,
  - the time/date or time period,
  - key numbers (amounts, years, percentages, counts),
  - the cause or the outcome of the events.
- The modified story must remain coherent and plausible.
- You MUST NOT merely paraphrase sentences or replace words with synonyms while keeping all facts the same.";

pub const REFERENCE_HEADER: &str = "Retrieved Writing Reference (for realism boundary; do NOT copy specific facts):";

pub const REFERENCE_RULES: &str = "\
How to use the reference:
- Use the retrieved articles as a realism boundary, not as facts to copy.
- Observe what kinds of details are typically reported for similar events (who speaks, where announcements happen, what numbers look reasonable).
- When changing facts, keep them within ranges and patterns commonly seen in real news reporting.
- Do NOT copy specific facts, names, or sentences from the reference.
- Do NOT introduce a new unrelated event.
- If the reference conflicts with the original story, keep your story internally consistent.
- Do NOT make factual changes that would look unusual or implausible compared to how similar real news events are typically reported.";

pub const FORMATTING_RULES: &str = "\
CRITICAL FORMATTING RULES:
1. Do NOT use any Markdown formatting (no ###, no **, no bullet points).
2. Do NOT add extra blank lines between paragraphs.
3. Keep the EXACT same paragraph structure as the original.
4. Keep the overall length similar to the original article (stay roughly within ±20% of the original length).
5. Do NOT add long background sections or speculative analysis that are not implied by the original article.
6. Start directly with the news content.
7. Output ONLY the rewritten fake news article, nothing else.
8. DO NOT include the original text, headings, labels (e.g., “Modified version:”), or any explanations—only the final rewritten article content.";

pub const FEEDBACK_HEADER: &str = "CRITICAL: DETECTOR FEEDBACK - YOU MUST ADDRESS THIS";

pub const ADAPTATION_STRATEGY: &str = "\
YOUR ADAPTATION STRATEGY:
1. First, identify which flagged words/phrases you used before
2. Replace them with neutral, professional alternatives
3. Use the RAG context to understand what kinds of changes are plausible in real news reporting. It defines a realism boundary, not facts to copy. Do NOT ensure factual consistency with it.
4. Maintain a calm, objective journalistic voice throughout
5. DO NOT use words like \"shocking\", \"unbelievable\", \"sources say\", etc.";

pub const RAG_CONTEXT_HEADER: &str = "Real news writing reference (for realism boundary only; not factual grounding):";

/// The generator-side reference block: header, then passages in rank order.
pub fn render_rag_context(passages: &[RetrievedPassage]) -> String {
    let mut out = String::from(RAG_CONTEXT_HEADER);
    for p in passages {
        out.push_str("\n\n");
        out.push_str(&p.text);
    }
    out
}

/// The feedback wrapper around rendered detector output.
pub fn render_feedback_section(report: &VafReport, exemplars: &[Exemplar]) -> String {
    format!(
        "{FEEDBACK_HEADER}\n\n{}\n\n{ADAPTATION_STRATEGY}",
        render_feedback(report, exemplars)
    )
}

/// Slot contents for one user prompt.
#[derive(Debug, Clone, Copy)]
pub struct UserSlots<'a> {
    pub article: &'a str,
    pub feedback: Option<&'a VafReport>,
    pub exemplars: &'a [Exemplar],
    /// `None` when generator-side retrieval is off.
    pub context: Option<&'a [RetrievedPassage]>,
}

/// Assembles the user prompt: article, feedback (or exemplars alone when no
/// feedback exists), task, reference and its rules, formatting rules.
pub fn render_user_prompt(slots: UserSlots<'_>) -> String {
    let mut parts: Vec<String> = vec![format!("{ARTICLE_HEADER}\n{}", slots.article)];
    match slots.feedback {
        Some(report) => parts.push(render_feedback_section(report, slots.exemplars)),
        None if !slots.exemplars.is_empty() => parts.push(render_exemplars(slots.exemplars)),
        None => {}
    }
    parts.push(TASK_BLOCK.to_string());
    if let Some(context) = slots.context {
        parts.push(format!("{REFERENCE_HEADER}\n{}", render_rag_context(context)));
        parts.push(REFERENCE_RULES.to_string());
    }
    parts.push(FORMATTING_RULES.to_string());
    parts.join("\n\n")
}

/// Recovers the article slot from a rendered user prompt.
pub fn extract_article(user_prompt: &str) -> Option<&str> {
    let start = user_prompt.find(ARTICLE_HEADER)? + ARTICLE_HEADER.len() + 1;
    let rest = user_prompt.get(start..)?;
    let end = [
        format!("\n\n{FEEDBACK_HEADER}"),
        "\n\n===========================================\nSUCCESSFUL EXAMPLE".to_string(),
        "\n\nTask:\nRewrite the news above".to_string(),
    ]
    .iter()
    .filter_map(|m| rest.find(m.as_str()))
    .min()?;
    Some(&rest[..end])
}

/// Words listed on the "Flagged Suspicious Terms" line, if any.
pub fn flagged_terms(user_prompt: &str) -> Vec<String> {
    let Some(line) = user_prompt.lines().find_map(|l| l.strip_prefix("Flagged Suspicious Terms: ")) else {
        return Vec::new();
    };
    if line == "(none)" {
        return Vec::new();
    }
    line.split(", ")
        .filter_map(|item| item.rsplit_once('(').map(|(w, _)| w.to_string()))
        .collect()
}
