//! Tokenization shared by chunking, indexing and statement matching.
//!
//! Two views of the same text are used throughout:
//!
//! * **surface tokens** keep case and isolate boundary punctuation as
//!   single-character tokens (`"(novel)."` becomes `(`, `novel`, `)`, `.`).
//!   Chunking packs surface tokens, and [`detokenize`] turns them back into
//!   display text without changing how they re-tokenize.
//! * **terms** are the lowercased surface tokens that contain at least one
//!   alphanumeric character. Retrieval, normalization and containment checks
//!   all work on terms.

use alloc::string::String;
use alloc::vec::Vec;

/// Punctuation that attaches to the token on its left when detokenizing.
const CLOSING: &[char] = &['.', ',', ';', ':', '!', '?', ')', ']', '}', '%'];
/// Punctuation that attaches to the token on its right when detokenizing.
const OPENING: &[char] = &['(', '[', '{'];

/// Function words ignored when deciding whether a statement carries content.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "an", "and", "are", "as", "at", "be", "been", "by", "did", "do", "does", "for",
    "from", "had", "has", "have", "how", "in", "into", "is", "it", "its", "many", "much", "of",
    "on", "or", "that", "the", "their", "there", "these", "this", "those", "to", "was", "were",
    "what", "when", "where", "which", "who", "whom", "whose", "why", "will", "with",
];

/// A term together with its character offsets in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermSpan {
    pub term: String,
    /// Inclusive start, in characters.
    pub start: usize,
    /// Exclusive end, in characters.
    pub end: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Splits one whitespace-free word into surface pieces as char ranges
/// relative to `chars`.
fn split_word(chars: &[char], offset: usize, out: &mut Vec<(usize, usize)>) {
    let first = chars.iter().position(|c| is_word_char(*c));
    let Some(first) = first else {
        for i in 0..chars.len() {
            out.push((offset + i, offset + i + 1));
        }
        return;
    };
    // `first` exists, so `last` does too.
    let last = chars
        .iter()
        .rposition(|c| is_word_char(*c))
        .unwrap_or(first);
    for i in 0..first {
        out.push((offset + i, offset + i + 1));
    }
    out.push((offset + first, offset + last + 1));
    for i in last + 1..chars.len() {
        out.push((offset + i, offset + i + 1));
    }
}

fn surface_ranges(chars: &[char]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        split_word(&chars[start..i], start, &mut out);
    }
    out
}

/// Case-preserving surface tokenization.
pub fn surface_tokens(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    surface_ranges(&chars)
        .into_iter()
        .map(|(s, e)| chars[s..e].iter().collect())
        .collect()
}

fn is_single(token: &str, set: &[char]) -> bool {
    let mut it = token.chars();
    matches!((it.next(), it.next()), (Some(c), None) if set.contains(&c))
}

/// Joins surface tokens into readable text. `surface_tokens(&detokenize(t))`
/// returns `t` for any `t` produced by [`surface_tokens`].
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for (i, token) in tokens.iter().enumerate() {
        let token = token.as_ref();
        if i > 0 && !glue_next && !is_single(token, CLOSING) {
            out.push(' ');
        }
        out.push_str(token);
        glue_next = is_single(token, OPENING);
    }
    out
}

fn lowercase(token: &str) -> String {
    token.chars().flat_map(char::to_lowercase).collect()
}

/// Retrieval terms: lowercased, with punctuation stripped from term
/// boundaries.
pub fn tokenize(text: &str) -> Vec<String> {
    term_spans(text).into_iter().map(|t| t.term).collect()
}

/// Terms with their character offsets in `text`.
pub fn term_spans(text: &str) -> Vec<TermSpan> {
    let chars: Vec<char> = text.chars().collect();
    surface_ranges(&chars)
        .into_iter()
        .filter(|(s, e)| chars[*s..*e].iter().any(|c| is_word_char(*c)))
        .map(|(s, e)| {
            let raw: String = chars[s..e].iter().collect();
            TermSpan {
                term: lowercase(&raw),
                start: s,
                end: e,
            }
        })
        .collect()
}

/// Clause-level candidate statements: maximal runs of words between
/// sentence or clause punctuation, as character ranges from the first word's
/// start to the last word's end.
pub fn clause_spans(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for (s, e) in surface_ranges(&chars) {
        let piece = &chars[s..e];
        if piece.iter().any(|c| is_word_char(*c)) {
            current = Some(match current {
                Some((start, _)) => (start, e),
                None => (s, e),
            });
        } else if piece.len() == 1 && CLAUSE_BREAKS.contains(&piece[0]) {
            if let Some(span) = current.take() {
                out.push(span);
            }
        }
    }
    out.extend(current);
    out
}

const CLAUSE_BREAKS: &[char] = &['.', ',', ';', ':', '!', '?'];

/// Terms of a single surface token, i.e. the lowercased token when it is a
/// word, otherwise nothing.
pub fn token_term(token: &str) -> Option<String> {
    token.chars().any(is_word_char).then(|| lowercase(token))
}

/// Canonical statement form: lowercase, punctuation stripped, whitespace
/// collapsed to single spaces.
pub fn normalize_statement(text: &str) -> String {
    tokenize(text).join(" ")
}

pub fn is_stopword(term: &str) -> bool {
    STOPWORDS.binary_search(&term).is_ok()
}

/// Terms of `text` that are not stopwords, in order.
pub fn content_terms(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .collect()
}

/// Position of the first contiguous occurrence of `needle` in `haystack`.
/// An empty needle never matches.
pub fn find_run<T: PartialEq>(haystack: &[T], needle: &[T]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

pub fn contains_run<T: PartialEq>(haystack: &[T], needle: &[T]) -> bool {
    find_run(haystack, needle).is_some()
}

/// Number of characters in `text`; offsets in this crate are char indices.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Substring by character offsets. Returns `None` when out of range.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(core::iter::once(text.len()));
    let from = indices.nth(start)?;
    let to = if end == start {
        from
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&text[from..to])
}
