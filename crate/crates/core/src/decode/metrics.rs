//! Word error rate and corpus-level BLEU.

use std::collections::HashMap;

use thiserror::Error;

use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("segment count mismatch: {refs} references vs {hyps} hypotheses")]
    CountMismatch { refs: usize, hyps: usize },
}

/// Word error rate: unit-cost Levenshtein distance over tokens divided by
/// the reference length. May exceed 1.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(
    reference: &[R],
    hypothesis: &[H],
) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let dist = levenshtein(reference, hypothesis);
    Ok(dist as f64 / reference.len() as f64)
}

fn levenshtein<R: AsRef<str>, H: AsRef<str>>(a: &[R], b: &[H]) -> usize {
    let m = a.len();
    let n = b.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut curr = vec![0usize; n + 1];
    for i in 1..=m {
        curr[0] = i;
        for j in 1..=n {
            let cost = usize::from(a[i - 1].as_ref() != b[j - 1].as_ref());
            curr[j] = (prev[j] + 1).min(curr[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[n]
}

/// Corpus-level BLEU-4 in [0, 100] with a single reference per segment.
///
/// Both sides are lowercased and run through the rule tokenizer. Clipped
/// n-gram counts are pooled over the corpus; the score is the geometric mean
/// of the order precisions times the brevity penalty exp(1 - r/c) when the
/// hypothesis is shorter. Orders with no hypothesis n-grams at all are left
/// out of the mean; a pooled precision of zero yields score 0.
pub fn bleu<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64, MetricError> {
    if refs.len() != hyps.len() {
        return Err(MetricError::CountMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    const MAX_N: usize = 4;
    let mut matched = [0u64; MAX_N];
    let mut total = [0u64; MAX_N];
    let mut ref_len = 0u64;
    let mut hyp_len = 0u64;
    for (r, h) in refs.iter().zip(hyps.iter()) {
        let r_toks = tokenize(&r.as_ref().to_lowercase());
        let h_toks = tokenize(&h.as_ref().to_lowercase());
        ref_len += r_toks.len() as u64;
        hyp_len += h_toks.len() as u64;
        for n in 1..=MAX_N {
            if h_toks.len() < n {
                continue;
            }
            let ref_counts = ngram_counts(&r_toks, n);
            let mut hyp_counts = ngram_counts(&h_toks, n);
            total[n - 1] += (h_toks.len() - n + 1) as u64;
            for (gram, count) in hyp_counts.drain() {
                let clip = ref_counts.get(&gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..MAX_N {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let precision = (log_sum / orders as f64).exp();
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * precision)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts: HashMap<Vec<&str>, u64> = HashMap::new();
    for win in tokens.windows(n) {
        let key: Vec<&str> = win.iter().map(|s| s.as_str()).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    #[test]
    fn identical_sequences_have_zero_wer() {
        assert_eq!(wer(&words("a b c"), &words("a b c")).unwrap(), 0.0);
    }

    #[test]
    fn substitution_plus_deletion() {
        let rate = wer(&words("a b c d"), &words("a x c")).unwrap();
        assert_eq!(rate, 0.5);
    }

    #[test]
    fn wer_can_exceed_one() {
        let rate = wer(&words("a"), &words("a b c")).unwrap();
        assert_eq!(rate, 2.0);
    }

    #[test]
    fn empty_reference_rejected() {
        let none: Vec<String> = Vec::new();
        assert!(matches!(
            wer(&none, &words("a")),
            Err(MetricError::EmptyReference)
        ));
    }

    #[test]
    fn wer_invariant_under_token_relabeling() {
        let refs = words("a b a c");
        let hyps = words("a c b");
        let base = wer(&refs, &hyps).unwrap();
        let relabel = |t: &str| format!("tok-{t}");
        let refs2: Vec<String> = refs.iter().map(|t| relabel(t)).collect();
        let hyps2: Vec<String> = hyps.iter().map(|t| relabel(t)).collect();
        assert_eq!(base, wer(&refs2, &hyps2).unwrap());
    }

    #[test]
    fn identical_corpus_scores_100() {
        let refs = ["the cat sat on the mat", "a quick brown fox"];
        assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn brevity_penalty_hand_case() {
        // Precisions 4/4, 3/3, 2/2, 1/1; BP = exp(1 - 5/4).
        let refs = ["a b c d e"];
        let hyps = ["a b c d"];
        let expect = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
        let got = bleu(&refs, &hyps).unwrap();
        assert!((got - expect).abs() < 1e-6);
        assert!((got - 77.8800783).abs() < 1e-4);
    }

    #[test]
    fn case_insensitive() {
        assert!((bleu(&["A B"], &["a b"]).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn count_mismatch_rejected() {
        assert!(matches!(
            bleu(&["a"], &["a", "b"]),
            Err(MetricError::CountMismatch { refs: 1, hyps: 2 })
        ));
    }

    #[test]
    fn zero_pooled_precision_scores_zero() {
        let refs = ["a b c d e f"];
        let hyps = ["x y z w v u"];
        assert_eq!(bleu(&refs, &hyps).unwrap(), 0.0);
    }

    #[test]
    fn permutation_invariant_over_segments() {
        let refs = ["one two three four", "five six seven", "eight nine ten eleven"];
        let hyps = ["one two three", "five six banana", "eight nine ten eleven"];
        let a = bleu(&refs, &hyps).unwrap();
        let refs_p = [refs[2], refs[0], refs[1]];
        let hyps_p = [hyps[2], hyps[0], hyps[1]];
        let b = bleu(&refs_p, &hyps_p).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
