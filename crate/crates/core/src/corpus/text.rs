//! Text normalization, word tokenization and rule-based sentence splitting.
//!
//! All three functions are deterministic and total. The tokenizer is word level:
//! leading and trailing punctuation is peeled off into one-character tokens while
//! interior punctuation (hyphens, apostrophes, the dots of `u.s`) stays attached.

use std::collections::HashSet;
use std::sync::OnceLock;

use unicode_normalization::UnicodeNormalization;

/// Normalized surface form of the mask placeholder. Always emitted as a single token.
pub const MASK_TOKEN: &str = "[mask]";

static ABBREVIATIONS: &str = include_str!("../../data/abbreviations.txt");

fn abbreviations() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        ABBREVIATIONS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

/// Lowercase, strip control characters, collapse whitespace runs to one space, trim,
/// and compose to Unicode NFC.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if ch.is_control() {
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push(ch);
    }
    out.nfc().collect()
}

/// Split normalized text into word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while let Some(at) = rest.find(MASK_TOKEN) {
            split_chunk(&rest[..at], &mut tokens);
            tokens.push(MASK_TOKEN.to_string());
            rest = &rest[at + MASK_TOKEN.len()..];
        }
        split_chunk(rest, &mut tokens);
    }
    tokens
}

fn split_chunk(chunk: &str, out: &mut Vec<String>) {
    if chunk.is_empty() {
        return;
    }
    let Some(first) = chunk.find(|c: char| c.is_alphanumeric()) else {
        out.extend(chunk.chars().map(String::from));
        return;
    };
    let last = chunk
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_alphanumeric())
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(chunk.len());
    out.extend(chunk[..first].chars().map(String::from));
    out.push(chunk[first..last].to_string());
    out.extend(chunk[last..].chars().map(String::from));
}

/// Byte spans of the sentences in normalized text.
///
/// A boundary sits after `.`, `!` or `?` when followed by a single space and a letter,
/// unless the word carrying the period is on the abbreviation guard list. Consecutive
/// spans are separated by exactly that one space, so joining the span texts with `" "`
/// reconstructs the input.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    if text.is_empty() {
        return spans;
    }
    let bytes = text.as_bytes();
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if !matches!(ch, '.' | '!' | '?') {
            continue;
        }
        let end = i + 1;
        if bytes.get(end) != Some(&b' ') {
            continue;
        }
        let next_is_letter = text[end + 1..]
            .chars()
            .next()
            .is_some_and(char::is_alphabetic);
        if !next_is_letter {
            continue;
        }
        if ch == '.' && is_guarded(&text[start..end]) {
            continue;
        }
        spans.push((start, end));
        start = end + 1;
    }
    spans.push((start, text.len()));
    spans
}

fn is_guarded(sentence_prefix: &str) -> bool {
    let word = sentence_prefix
        .rsplit(' ')
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| !c.is_alphanumeric());
    abbreviations().contains(word)
}
