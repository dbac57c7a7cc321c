//! Beam-search inference and evaluation metrics.

pub mod metrics;

use thiserror::Error;

pub use metrics::{bleu, wer, MetricError};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error("encoder produced no output frames")]
    EmptyEncoderOutput,
    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
}

/// One autoregressive step of a decoding model.
pub trait StepDecoder {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn start_state(&self) -> Self::State;
    /// Log-probabilities over the vocabulary after consuming `prev_token`.
    fn step(&self, state: &Self::State, prev_token: usize)
        -> Result<(Vec<f64>, Self::State), DecodeError>;
}

/// A finished decode: token ids (bos ... eos-or-cutoff), cumulative
/// log-probability, and the length-normalized score used for ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
}

impl Hypothesis {
    fn from_parts(tokens: Vec<usize>, log_prob: f64) -> Hypothesis {
        // Normalized by the number of generated tokens (bos excluded,
        // eos counted), exponent 1.
        let gen_len = (tokens.len() - 1).max(1);
        Hypothesis {
            tokens,
            log_prob,
            score: log_prob / gen_len as f64,
        }
    }
}

struct Live<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
}

/// Standard beam search. Per step every live hypothesis is expanded over the
/// full vocabulary and the top `beam` candidates by cumulative
/// log-probability survive (ties broken by hypothesis index then token id).
/// A candidate emitting `eos` is finalized. Decoding stops once `beam`
/// hypotheses are finalized or `max_len` tokens were generated; remaining
/// live hypotheses are then cut off and finalized as-is. The returned n-best
/// list is ordered by length-normalized score.
pub fn beam_search<D: StepDecoder>(
    decoder: &D,
    bos: usize,
    eos: Option<usize>,
    beam: usize,
    max_len: usize,
) -> Result<(Hypothesis, Vec<Hypothesis>), DecodeError> {
    if beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    if max_len == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    let vocab = decoder.vocab_size();
    let mut live: Vec<Live<D::State>> = vec![Live {
        tokens: vec![bos],
        log_prob: 0.0,
        state: decoder.start_state(),
    }];
    let mut finalized: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        // (cumulative lp, live index, token, successor state)
        let mut candidates: Vec<(f64, usize, usize, D::State)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let (logprobs, next_state) = decoder.step(&hyp.state, *hyp.tokens.last().unwrap())?;
            debug_assert_eq!(logprobs.len(), vocab);
            for (tok, &lp) in logprobs.iter().enumerate() {
                candidates.push((hyp.log_prob + lp, h, tok, next_state.clone()));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(beam);

        let mut next_live = Vec::with_capacity(beam);
        for (lp, h, tok, state) in candidates {
            let mut tokens = live[h].tokens.clone();
            tokens.push(tok);
            if Some(tok) == eos {
                finalized.push(Hypothesis::from_parts(tokens, lp));
            } else {
                next_live.push(Live {
                    tokens,
                    log_prob: lp,
                    state,
                });
            }
        }
        live = next_live;
        if finalized.len() >= beam || live.is_empty() {
            break;
        }
    }
    if finalized.len() < beam {
        for hyp in live {
            finalized.push(Hypothesis::from_parts(hyp.tokens, hyp.log_prob));
        }
    }
    finalized.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let best = finalized[0].clone();
    Ok((best, finalized))
}

/// Greedy decoding; identical to beam search with beam size 1.
pub fn greedy_decode<D: StepDecoder>(
    decoder: &D,
    bos: usize,
    eos: Option<usize>,
    max_len: usize,
) -> Result<Hypothesis, DecodeError> {
    beam_search(decoder, bos, eos, 1, max_len).map(|(best, _)| best)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Toy decoder: transition table of log-probs conditioned on the
    /// previous token only.
    struct TableDecoder {
        table: Vec<Vec<f64>>, // [prev][next] log-probs
    }

    impl StepDecoder for TableDecoder {
        type State = ();

        fn vocab_size(&self) -> usize {
            self.table.len()
        }
        fn start_state(&self) {}
        fn step(&self, _: &(), prev: usize) -> Result<(Vec<f64>, ()), DecodeError> {
            if prev >= self.table.len() {
                return Err(DecodeError::TokenOutOfRange {
                    id: prev,
                    vocab: self.table.len(),
                });
            }
            Ok((self.table[prev].clone(), ()))
        }
    }

    fn normalize_rows(mut table: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        for row in table.iter_mut() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for v in row.iter_mut() {
                *v -= z.ln();
            }
        }
        table
    }

    #[test]
    fn one_hot_rule_emits_its_sequence_for_any_beam() {
        // 0 -> 1 -> 2 -> 3(eos) nearly deterministic.
        let big = 50.0;
        let table = normalize_rows(vec![
            vec![0.0, big, 0.0, 0.0],
            vec![0.0, 0.0, big, 0.0],
            vec![0.0, 0.0, 0.0, big],
            vec![big, 0.0, 0.0, 0.0],
        ]);
        for beam in [1, 2, 4, 8] {
            let dec = TableDecoder {
                table: table.clone(),
            };
            let (best, _) = beam_search(&dec, 0, Some(3), beam, 10).unwrap();
            assert_eq!(best.tokens, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn beam_one_equals_greedy() {
        let table = normalize_rows(vec![
            vec![0.1, 0.9, 0.3, 0.2],
            vec![0.5, 0.1, 0.8, 0.1],
            vec![0.2, 0.7, 0.1, 0.4],
            vec![0.3, 0.3, 0.3, 0.3],
        ]);
        let dec = TableDecoder { table };
        let (b1, _) = beam_search(&dec, 0, None, 1, 4).unwrap();
        let g = greedy_decode(&dec, 0, None, 4).unwrap();
        assert_eq!(b1, g);
    }

    #[test]
    fn zero_beam_and_zero_len_rejected() {
        let dec = TableDecoder {
            table: normalize_rows(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
        };
        assert!(matches!(
            beam_search(&dec, 0, None, 0, 4),
            Err(DecodeError::ZeroBeam)
        ));
        assert!(matches!(
            beam_search(&dec, 0, None, 2, 0),
            Err(DecodeError::ZeroMaxLen)
        ));
    }

    #[test]
    fn max_len_cuts_off_without_eos() {
        let dec = TableDecoder {
            table: normalize_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        };
        let (best, _) = beam_search(&dec, 0, None, 2, 3).unwrap();
        assert_eq!(best.tokens.len(), 4); // bos + 3 generated
    }
}
