//! Byte-pair encoding vocabulary training over whitespace-marked words.

use std::collections::HashMap;

use super::vocab::{Vocabulary, VocabularyKind, RESERVED, WORD_END};
use super::TextError;

/// Trains a subword vocabulary of exactly `size` symbols: the reserved
/// symbols, the single characters of the word-marked corpus, and merge
/// results, added most-frequent pair first until the target size is reached.
pub fn build_subword_vocab<S: AsRef<str>>(
    corpus: &[S],
    size: usize,
) -> Result<Vocabulary, TextError> {
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    // Word multiset, each word as a symbol sequence of chars + end marker.
    let mut words: HashMap<Vec<String>, u64> = HashMap::new();
    for line in corpus {
        for word in line.as_ref().split_whitespace() {
            let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
            syms.push(WORD_END.to_string());
            *words.entry(syms).or_insert(0) += 1;
        }
    }

    // Base inventory: single chars + the end marker, frequency then symbol order.
    let mut char_freq: HashMap<String, u64> = HashMap::new();
    for (syms, n) in &words {
        for s in syms {
            *char_freq.entry(s.clone()).or_insert(0) += n;
        }
    }
    let mut base: Vec<(String, u64)> = char_freq.into_iter().collect();
    base.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut symbols: Vec<String> = base.into_iter().map(|(s, _)| s).collect();

    let minimum = RESERVED.len() + symbols.len();
    if size < minimum {
        return Err(TextError::InsufficientCorpus {
            requested: size,
            achievable: minimum,
        });
    }

    let mut in_vocab: HashMap<String, ()> =
        symbols.iter().map(|s| (s.clone(), ())).collect();
    while RESERVED.len() + symbols.len() < size {
        // Count adjacent pairs across the word multiset.
        let mut pair_freq: HashMap<(String, String), u64> = HashMap::new();
        for (syms, n) in &words {
            for win in syms.windows(2) {
                *pair_freq
                    .entry((win[0].clone(), win[1].clone()))
                    .or_insert(0) += n;
            }
        }
        // Most frequent pair, ties by lexicographic pair order.
        let best = pair_freq
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((left, right), _)) = best else {
            return Err(TextError::InsufficientCorpus {
                requested: size,
                achievable: RESERVED.len() + symbols.len(),
            });
        };
        let merged = format!("{left}{right}");
        words = words
            .into_iter()
            .map(|(syms, n)| (apply_merge(&syms, &left, &right, &merged), n))
            .collect();
        if !in_vocab.contains_key(&merged) && !RESERVED.contains(&merged.as_str()) {
            in_vocab.insert(merged.clone(), ());
            symbols.push(merged);
        }
    }
    Ok(Vocabulary::from_symbols(symbols, VocabularyKind::Subword))
}

fn apply_merge(syms: &[String], left: &str, right: &str, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}
