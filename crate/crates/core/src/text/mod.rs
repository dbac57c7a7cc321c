//! Text normalization, tokenization, vocabulary construction, and corpus
//! filtering.

pub mod bpe;
pub mod vocab;

use thiserror::Error;

pub use bpe::build_subword_vocab;
pub use vocab::{build_char_vocab, Vocabulary, VocabularyKind};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("invalid UTF-8 input")]
    InvalidUtf8,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus only supports a vocabulary of {achievable} symbols, {requested} requested")]
    InsufficientCorpus {
        requested: usize,
        achievable: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: malformed vocabulary file: {msg}")]
    MalformedVocab { path: String, msg: String },
}

/// Folds unicode punctuation variants to ASCII, lowercases, optionally strips
/// punctuation (for transcripts), and collapses whitespace.
pub fn normalize(text: &str, is_transcript: bool) -> String {
    let mut folded = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{2032}' => folded.push('\''),
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{2033}' => folded.push('"'),
            '\u{2010}' | '\u{2011}' | '\u{2012}' | '\u{2013}' | '\u{2014}' | '\u{2015}' => {
                folded.push('-')
            }
            '\u{2026}' => folded.push_str("..."),
            '\u{00A0}' | '\u{2009}' | '\u{200A}' | '\u{2002}' | '\u{2003}' => folded.push(' '),
            _ => folded.push(ch),
        }
    }
    let lowered = folded.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for ch in lowered.chars() {
        if ch.is_whitespace() {
            pending_space = true;
            continue;
        }
        if is_transcript && is_punctuation(ch) {
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.push(ch);
    }
    out
}

fn is_punctuation(ch: char) -> bool {
    !ch.is_alphanumeric() && !ch.is_whitespace()
}

/// Splits on whitespace and detaches punctuation characters into standalone
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if is_punctuation(ch) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Corpus-filtering rule: keep a sample iff 5 <= frames <= 3000 and
/// 1 <= chars <= 400.
pub fn keep_sample(frames: usize, chars: usize) -> bool {
    (5..=3000).contains(&frames) && (1..=400).contains(&chars)
}

/// Retains the samples passing [`keep_sample`] on (frames, chars) pairs.
pub fn filter_samples<S>(corpus: Vec<(S, usize, usize)>) -> Vec<(S, usize, usize)> {
    corpus
        .into_iter()
        .filter(|&(_, frames, chars)| keep_sample(frames, chars))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_keeps_punctuation_for_translations() {
        assert_eq!(normalize("Hello,  WORLD!", false), "hello, world!");
    }

    #[test]
    fn normalize_strips_punctuation_for_transcripts() {
        assert_eq!(normalize("Hello, world!", true), "hello world");
    }

    #[test]
    fn normalize_empty_is_empty() {
        assert_eq!(normalize("", false), "");
        assert_eq!(normalize("", true), "");
    }

    #[test]
    fn normalize_folds_unicode_punctuation() {
        assert_eq!(
            normalize("\u{201C}Hi\u{201D} \u{2014} bye\u{2026}", false),
            "\"hi\" - bye..."
        );
        assert_eq!(normalize("don\u{2019}t", true), "dont");
    }

    #[test]
    fn normalize_is_idempotent() {
        for flag in [false, true] {
            for s in ["  A  b\tc ", "it\u{2019}s \u{2013} FINE...", "x,y;z!"] {
                let once = normalize(s, flag);
                assert_eq!(normalize(&once, flag), once);
            }
        }
    }

    #[test]
    fn tokenize_detaches_punctuation() {
        let toks = tokenize("hello, world!");
        assert_eq!(toks, vec!["hello", ",", "world", "!"]);
        assert_eq!(tokenize("abc"), vec!["abc"]);
        assert_eq!(tokenize("a-b"), vec!["a", "-", "b"]);
    }

    #[test]
    fn filter_boundaries() {
        assert!(!keep_sample(3001, 10));
        assert!(keep_sample(3000, 10));
        assert!(keep_sample(5, 1));
        assert!(!keep_sample(4, 10));
        assert!(!keep_sample(10, 0));
        assert!(!keep_sample(10, 401));
        assert!(keep_sample(10, 400));
    }

    #[test]
    fn filter_is_a_subset_and_fixed_point() {
        let corpus: Vec<(usize, usize, usize)> = (0..500)
            .map(|i| (i, (i * 37) % 4000, (i * 13) % 500))
            .collect();
        let once = filter_samples(corpus.clone());
        assert!(once.iter().all(|s| corpus.contains(s)));
        let twice = filter_samples(once.clone());
        assert_eq!(once, twice);
    }
}
