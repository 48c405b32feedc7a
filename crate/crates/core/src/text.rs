//! Small text utilities shared across modules.

use std::collections::BTreeSet;

/// Normalizes whitespace while keeping paragraph breaks.
///
/// CRLF becomes LF, runs of spaces and tabs inside a line collapse to one
/// space, lines are trimmed, and runs of blank lines collapse to a single
/// blank line. Leading and trailing blank lines are dropped.
pub fn normalize_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_blank = false;
    for raw in text.replace("\r\n", "\n").replace('\r', "\n").split('\n') {
        let line = raw.split_whitespace().collect::<Vec<_>>().join(" ");
        if line.is_empty() {
            pending_blank = !out.is_empty();
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
            if pending_blank {
                out.push('\n');
            }
        }
        pending_blank = false;
        out.push_str(&line);
    }
    out
}

/// A word with its byte span in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordSpan<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

/// Splits text into words: maximal runs of alphanumerics (plus inner
/// apostrophes and hyphens), and single punctuation characters.
pub fn words_with_spans(text: &str) -> Vec<WordSpan<'_>> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_alphanumeric() {
            let mut j = i + 1;
            while j < chars.len() {
                let cj = chars[j].1;
                let joins = (cj == '\'' || cj == '-' || cj == '’')
                    && j + 1 < chars.len()
                    && chars[j + 1].1.is_alphanumeric();
                if cj.is_alphanumeric() || joins {
                    j += 1;
                } else {
                    break;
                }
            }
            let end = chars.get(j).map_or(text.len(), |&(b, _)| b);
            out.push(WordSpan { text: &text[start..end], start, end });
            i = j;
        } else {
            let end = start + c.len_utf8();
            out.push(WordSpan { text: &text[start..end], start, end });
            i += 1;
        }
    }
    out
}

/// Lowercased alphanumeric words, used for shingling and hashing features.
pub fn content_words(text: &str) -> Vec<String> {
    words_with_spans(text)
        .into_iter()
        .filter(|w| w.text.chars().any(char::is_alphanumeric))
        .map(|w| w.text.to_lowercase())
        .collect()
}

pub fn is_punctuation(word: &str) -> bool {
    !word.is_empty() && word.chars().all(|c| !c.is_alphanumeric())
}

/// Finds case-insensitive occurrences of `phrase` in `text` that start and
/// end on word boundaries.
pub fn contains_phrase(text: &str, phrase: &str) -> bool {
    let phrase = phrase.trim().to_lowercase();
    if phrase.is_empty() {
        return false;
    }
    let hay = text.to_lowercase();
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&phrase) {
        let start = from + pos;
        let end = start + phrase.len();
        let before_ok = hay[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after_ok = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// 64-bit FNV-1a. Stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Parses a term list: one term per line, `#` starts a comment, blank lines
/// ignored. Terms are kept in file order, lowercased, without duplicates.
pub fn parse_term_list(source: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in source.lines() {
        let term = line.split('#').next().unwrap_or("").trim().to_lowercase();
        if !term.is_empty() && seen.insert(term.clone()) {
            out.push(term);
        }
    }
    out
}

/// Truncates to at most `max_words` whitespace-separated words.
pub fn truncate_words(text: &str, max_words: usize) -> String {
    text.split_whitespace().take(max_words).collect::<Vec<_>>().join(" ")
}
