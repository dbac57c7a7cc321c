//! Training driver: length-bucketed batching by frame budget, SpecAugment on
//! input features, teacher-forced cross-entropy, Adam with gradient
//! clipping, and decode/score helpers.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{specaugment, AugmentPolicy, FeatureSequence};
use crate::decode::{beam_search, bleu, Hypothesis};
use crate::numerics::{Adam, Scalar, Schedule, Tape, Tensor};
use crate::text::vocab::{BOS, EOS};
use crate::text::Vocabulary;
use crate::transfer::ParamModel;

use super::forward::{encode_batch_on_tape, per_example_losses, teacher_forced_ce, DecoderDims};
use super::infer::{encode_single, DecodeSession};
use super::{HybridModel, Seq2SeqError, Seq2SeqModel};

/// Model input of one training example.
#[derive(Debug, Clone)]
pub enum SourceData {
    Features(FeatureSequence),
    Codes(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub source: SourceData,
    pub target: Vec<usize>,
}

impl Example {
    pub fn frames(&self) -> usize {
        match &self.source {
            SourceData::Features(f) => f.num_frames(),
            SourceData::Codes(c) => c.len(),
        }
    }
}

/// Either translator architecture behind one training/decoding surface.
#[derive(Debug, Clone)]
pub enum Translator<T> {
    BiLstm(Seq2SeqModel<T>),
    Hybrid(HybridModel<T>),
}

impl<T: Scalar> Translator<T> {
    pub fn arch_kind(&self) -> &'static str {
        match self {
            Translator::BiLstm(_) => "seq2seq",
            Translator::Hybrid(_) => "hybrid",
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            Translator::BiLstm(m) => m.config.vocab,
            Translator::Hybrid(m) => m.config.vocab,
        }
    }

    /// The architecture's default schedule: fixed 1e-3 for the BiLSTM,
    /// polynomial decay peaking at 5e-5 for the hybrid.
    pub fn default_schedule(&self, total_steps: u64) -> Schedule {
        match self {
            Translator::BiLstm(_) => Schedule::fixed(1e-3),
            Translator::Hybrid(_) => HybridModel::<T>::default_schedule(total_steps),
        }
    }

    /// Teacher-forced forward: summed CE, token count, and per-example
    /// losses. Applies SpecAugment to feature inputs when a policy is given.
    fn forward_loss<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        batch: &[&Example],
        augment: Option<(&AugmentPolicy, &mut R)>,
        collect_nodes: &mut Vec<crate::numerics::NodeId>,
    ) -> Result<(crate::numerics::NodeId, usize, Vec<f64>), Seq2SeqError> {
        let targets: Vec<&[usize]> = batch.iter().map(|e| e.target.as_slice()).collect();
        match self {
            Translator::BiLstm(model) => {
                let mut feats: Vec<FeatureSequence> = Vec::with_capacity(batch.len());
                match augment {
                    Some((policy, rng)) => {
                        for e in batch {
                            let SourceData::Features(f) = &e.source else {
                                return Err(Seq2SeqError::FeatureDim {
                                    expected: model.config.input_dim,
                                    found: 0,
                                });
                            };
                            feats.push(specaugment(f, policy, rng));
                        }
                    }
                    None => {
                        for e in batch {
                            let SourceData::Features(f) = &e.source else {
                                return Err(Seq2SeqError::FeatureDim {
                                    expected: model.config.input_dim,
                                    found: 0,
                                });
                            };
                            feats.push(f.clone());
                        }
                    }
                }
                let refs: Vec<&FeatureSequence> = feats.iter().collect();
                let binding = model.bind(tape);
                collect_nodes.extend_from_slice(&binding.nodes);
                let enc = encode_batch_on_tape(model, tape, &binding, &refs)?;
                let dec = super::forward::decoder_nodes(&binding, model.config.dec_layers);
                let dims = DecoderDims {
                    layers: model.config.dec_layers,
                    hidden: model.config.dec_hidden,
                    enc_dim: model.config.enc_state_dim(),
                    vocab: model.config.vocab,
                };
                let (total, count, ce) = teacher_forced_ce(tape, &dec, &dims, &enc, &targets)?;
                let per_ex = per_example_losses(tape, &ce, batch.len());
                Ok((total, count, per_ex))
            }
            Translator::Hybrid(model) => {
                let codes: Vec<&[usize]> = batch
                    .iter()
                    .map(|e| match &e.source {
                        SourceData::Codes(c) => Ok(c.as_slice()),
                        SourceData::Features(_) => Err(Seq2SeqError::FeatureDim {
                            expected: 0,
                            found: 1,
                        }),
                    })
                    .collect::<Result<_, _>>()?;
                let binding = model.bind_own(tape);
                let mlm_binding = model.mlm.bind_with(tape, !model.config.freeze_encoder);
                if !model.config.freeze_encoder {
                    collect_nodes.extend(crate::ssl::mlm::MaskedLmModel::<T>::binding_nodes(
                        &mlm_binding,
                    ));
                }
                collect_nodes.extend_from_slice(&binding.nodes);
                let enc = model.encode_codes_on_tape(tape, &binding, &mlm_binding, &codes)?;
                let dec = model.decoder_nodes(&binding);
                let (total, count, ce) =
                    teacher_forced_ce(tape, &dec, &model.decoder_dims(), &enc, &targets)?;
                let per_ex = per_example_losses(tape, &ce, batch.len());
                Ok((total, count, per_ex))
            }
        }
    }

    /// Names of the parameters updated during training, in gradient order.
    fn trainable_names(&self) -> Vec<String> {
        match self {
            Translator::BiLstm(m) => m.named_params().into_iter().map(|(n, _)| n).collect(),
            Translator::Hybrid(m) => {
                let frozen = m.config.freeze_encoder;
                m.named_params()
                    .into_iter()
                    .map(|(n, _)| n)
                    .filter(|n| !frozen || !n.starts_with(super::hybrid::MLM_PREFIX))
                    .collect()
            }
        }
    }

    /// One training step: SpecAugment, teacher-forced loss, one Adam update.
    /// Returns the mean token loss.
    pub fn train_step<R: Rng>(
        &mut self,
        batch: &[&Example],
        policy: &AugmentPolicy,
        adam: &mut Adam<T>,
        lr: f64,
        step: usize,
        rng: &mut R,
    ) -> Result<f64, Seq2SeqError> {
        if batch.is_empty() {
            return Err(Seq2SeqError::EmptyBatch);
        }
        let mut tape = Tape::new();
        let mut nodes = Vec::new();
        let (total, count, _) =
            match self.forward_loss(&mut tape, batch, Some((policy, rng)), &mut nodes) {
                Ok(v) => v,
                Err(Seq2SeqError::Tape(crate::numerics::TapeError::NonFinite { .. })) => {
                    return Err(Seq2SeqError::NonFiniteLoss {
                        step,
                        examples: batch.iter().map(|e| e.id.clone()).collect(),
                    })
                }
                Err(e) => return Err(e),
            };
        let loss = tape.scale(total, 1.0 / count.max(1) as f64)?;
        let loss_value = tape.value(loss).data()[0].to_f64();
        if !loss_value.is_finite() {
            return Err(Seq2SeqError::NonFiniteLoss {
                step,
                examples: batch.iter().map(|e| e.id.clone()).collect(),
            });
        }
        let grads = tape.backward(loss)?;
        let names = self.trainable_names();
        let grad_tensors: Vec<Tensor<T>> = nodes
            .iter()
            .map(|&id| grads.get_or_zeros(id, tape.value(id).shape()))
            .collect();
        debug_assert_eq!(names.len(), grad_tensors.len());
        match self {
            Translator::BiLstm(m) => {
                let mut params = m.named_params_mut();
                let mut refs: Vec<(&str, &mut Tensor<T>)> = Vec::new();
                for ((_, t), name) in params.iter_mut().zip(names.iter()) {
                    refs.push((name.as_str(), *t));
                }
                adam.step(lr, &mut refs, &grad_tensors)?;
            }
            Translator::Hybrid(m) => {
                let frozen = m.config.freeze_encoder;
                let mut params = m.named_params_mut();
                let mut refs: Vec<(&str, &mut Tensor<T>)> = Vec::new();
                let mut ni = 0usize;
                for (name, t) in params.iter_mut() {
                    if frozen && name.starts_with(super::hybrid::MLM_PREFIX) {
                        continue;
                    }
                    refs.push((names[ni].as_str(), *t));
                    ni += 1;
                }
                adam.step(lr, &mut refs, &grad_tensors)?;
            }
        }
        Ok(loss_value)
    }

    /// Mean token loss and per-example losses without any update or augment.
    pub fn eval_loss(&self, batch: &[&Example]) -> Result<(f64, Vec<f64>), Seq2SeqError> {
        let mut tape = Tape::new();
        let mut nodes = Vec::new();
        let (total, count, per_ex) = self.forward_loss::<ChaCha8Rng>(
            &mut tape,
            batch,
            None,
            &mut nodes,
        )?;
        let loss = tape.scale(total, 1.0 / count.max(1) as f64)?;
        Ok((tape.value(loss).data()[0].to_f64(), per_ex))
    }

    /// Beam decode of one example's source.
    pub fn decode_source(
        &self,
        source: &SourceData,
        beam: usize,
        max_len: usize,
    ) -> Result<(Hypothesis, Vec<Hypothesis>), Seq2SeqError> {
        match (self, source) {
            (Translator::BiLstm(m), SourceData::Features(f)) => {
                let encoded = encode_single(m, f)?;
                let session = DecodeSession::new(m.decoder_params(), &encoded)?;
                Ok(beam_search(&session, BOS, Some(EOS), beam, max_len)?)
            }
            (Translator::Hybrid(m), SourceData::Codes(c)) => {
                let encoded = m.encode_single(c)?;
                let session = DecodeSession::new(m.decoder_params(), &encoded)?;
                Ok(beam_search(&session, BOS, Some(EOS), beam, max_len)?)
            }
            _ => Err(Seq2SeqError::FeatureDim {
                expected: 0,
                found: 0,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_frames: usize,
    pub schedule: Schedule,
    pub clip_norm: Option<f64>,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> TrainOptions {
        TrainOptions {
            epochs: 10,
            batch_frames: 8000,
            schedule: Schedule::fixed(1e-3),
            clip_norm: Some(5.0),
            augment: AugmentPolicy::default(),
            seed: 1,
        }
    }
}

/// Length-sorted buckets under the frame budget.
pub fn make_batches(examples: &[Example], batch_frames: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by(|&a, &b| {
        examples[a]
            .frames()
            .cmp(&examples[b].frames())
            .then_with(|| examples[a].id.cmp(&examples[b].id))
    });
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut frames = 0usize;
    for idx in order {
        let f = examples[idx].frames();
        if !current.is_empty() && frames + f > batch_frames {
            batches.push(std::mem::take(&mut current));
            frames = 0;
        }
        current.push(idx);
        frames += f;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Trains in place. `per_epoch` runs after each epoch (1-based) and may stop
/// training early by returning true. Returns the number of steps taken.
pub fn train_translator<T: Scalar>(
    model: &mut Translator<T>,
    examples: &[Example],
    opts: &TrainOptions,
    mut per_epoch: impl FnMut(usize, &Translator<T>) -> bool,
    mut metrics_log: Option<&mut dyn Write>,
) -> Result<usize, Seq2SeqError> {
    if examples.is_empty() {
        return Err(Seq2SeqError::EmptyBatch);
    }
    let batches = make_batches(examples, opts.batch_frames);
    let mut adam = Adam::new(opts.clip_norm);
    let mut step = 0usize;
    let start = Instant::now();
    for epoch in 1..=opts.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (epoch as u64).wrapping_mul(0x9E37));
        order.shuffle(&mut rng);
        for &bi in &order {
            let batch: Vec<&Example> = batches[bi].iter().map(|&i| &examples[i]).collect();
            let lr = opts.schedule.rate_at(step as u64);
            let loss = model.train_step(&batch, &opts.augment, &mut adam, lr, step, &mut rng)?;
            if let Some(log) = metrics_log.as_mut() {
                let _ = writeln!(
                    log,
                    "step={} epoch={} loss={:.6} lr={:.8} wallclock={:.3}",
                    step,
                    epoch,
                    loss,
                    lr,
                    start.elapsed().as_secs_f64()
                );
            }
            step += 1;
        }
        if per_epoch(epoch, model) {
            break;
        }
    }
    Ok(step)
}

/// Decodes every example (deterministic order) and returns hypotheses.
pub fn decode_corpus<T: Scalar>(
    model: &Translator<T>,
    examples: &[Example],
    beam: usize,
    max_len: usize,
) -> Result<Vec<(String, Hypothesis)>, Seq2SeqError> {
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        let (best, _) = model.decode_source(&e.source, beam, max_len)?;
        out.push((e.id.clone(), best));
    }
    Ok(out)
}

/// Corpus BLEU of beam decodes against the examples' target token sequences,
/// both rendered through the vocabulary.
pub fn corpus_bleu<T: Scalar>(
    model: &Translator<T>,
    examples: &[Example],
    vocab: &Vocabulary,
    beam: usize,
    max_len: usize,
) -> Result<f64, Seq2SeqError> {
    let hyps = decode_corpus(model, examples, beam, max_len)?;
    let hyp_text: Vec<String> = hyps.iter().map(|(_, h)| vocab.decode(&h.tokens)).collect();
    let ref_text: Vec<String> = examples.iter().map(|e| vocab.decode(&e.target)).collect();
    Ok(bleu(&ref_text, &hyp_text).expect("equal counts by construction"))
}

/// Corpus WER of beam decodes against the target transcripts.
pub fn corpus_wer<T: Scalar>(
    model: &Translator<T>,
    examples: &[Example],
    vocab: &Vocabulary,
    beam: usize,
    max_len: usize,
) -> Result<f64, Seq2SeqError> {
    let hyps = decode_corpus(model, examples, beam, max_len)?;
    let mut edits_total = 0.0;
    let mut ref_total = 0usize;
    for ((_, h), e) in hyps.iter().zip(examples) {
        let hyp_words: Vec<String> = vocab
            .decode(&h.tokens)
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        let ref_words: Vec<String> = vocab
            .decode(&e.target)
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        if ref_words.is_empty() {
            continue;
        }
        let rate = crate::decode::wer(&ref_words, &hyp_words).expect("non-empty reference");
        edits_total += rate * ref_words.len() as f64;
        ref_total += ref_words.len();
    }
    Ok(edits_total / ref_total.max(1) as f64)
}

impl<T: Scalar> ParamModel<T> for Translator<T> {
    fn arch_json(&self) -> serde_json::Value {
        match self {
            Translator::BiLstm(m) => m.arch_json(),
            Translator::Hybrid(m) => m.arch_json(),
        }
    }

    fn vocab_fingerprint(&self) -> Option<String> {
        match self {
            Translator::BiLstm(m) => m.vocab_fingerprint(),
            Translator::Hybrid(m) => m.vocab_fingerprint(),
        }
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Translator::BiLstm(m) => m.named_params(),
            Translator::Hybrid(m) => m.named_params(),
        }
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            Translator::BiLstm(m) => m.named_params_mut(),
            Translator::Hybrid(m) => m.named_params_mut(),
        }
    }
}
