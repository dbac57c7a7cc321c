//! Contrastive future-prediction pretraining over raw waveforms.
//!
//! A strided convolution encoder maps 16 kHz audio to latent frames at a
//! 10 ms hop (total stride 160); a causal convolution aggregator summarizes
//! past latents into context vectors; per-offset prediction heads score
//! future latents against within-sequence negatives through a sigmoid
//! contrastive loss.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SslError;
use crate::audio::Waveform;
use crate::numerics::{Adam, NodeId, Scalar, Schedule, Tape, Tensor};
use crate::transfer::ParamModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpcConfig {
    /// Latent and context width.
    pub channels: usize,
    /// Encoder layers; default total stride 160 (10 ms at 16 kHz).
    pub encoder: Vec<ConvSpec>,
    /// Causal aggregator depth (kernel 3, stride 1).
    pub agg_layers: usize,
    /// Prediction horizon K.
    pub steps: usize,
    /// Negatives per positive N.
    pub negatives: usize,
}

impl Default for CpcConfig {
    fn default() -> CpcConfig {
        CpcConfig {
            channels: 64,
            encoder: vec![
                ConvSpec { kernel: 10, stride: 5 },
                ConvSpec { kernel: 8, stride: 4 },
                ConvSpec { kernel: 4, stride: 2 },
                ConvSpec { kernel: 4, stride: 2 },
                ConvSpec { kernel: 4, stride: 2 },
            ],
            agg_layers: 3,
            steps: 12,
            negatives: 10,
        }
    }
}

impl CpcConfig {
    pub fn total_stride(&self) -> usize {
        self.encoder.iter().map(|c| c.stride).product()
    }

    /// Latent frame count for a waveform length (ceil division per layer).
    pub fn frame_count(&self, samples: usize) -> usize {
        let mut t = samples;
        for c in &self.encoder {
            t = t.div_ceil(c.stride);
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct CpcModel<T> {
    pub config: CpcConfig,
    enc_w: Vec<Tensor<T>>,
    enc_b: Vec<Tensor<T>>,
    agg_w: Vec<Tensor<T>>,
    agg_b: Vec<Tensor<T>>,
    head_w: Vec<Tensor<T>>,
    head_b: Vec<Tensor<T>>,
}

impl<T: Scalar> CpcModel<T> {
    pub fn init(config: CpcConfig, seed: u64) -> CpcModel<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.channels;
        let mut enc_w = Vec::new();
        let mut enc_b = Vec::new();
        let mut c_in = 1usize;
        for spec in &config.encoder {
            let fan_in = spec.kernel * c_in;
            enc_w.push(
                Tensor::glorot(vec![d, spec.kernel, c_in], fan_in, d, &mut rng).with_grad(),
            );
            enc_b.push(Tensor::zeros(vec![d]).with_grad());
            c_in = d;
        }
        let mut agg_w = Vec::new();
        let mut agg_b = Vec::new();
        for _ in 0..config.agg_layers {
            agg_w.push(Tensor::glorot(vec![d, 3, d], 3 * d, d, &mut rng).with_grad());
            agg_b.push(Tensor::zeros(vec![d]).with_grad());
        }
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for _ in 0..config.steps {
            head_w.push(Tensor::glorot(vec![d, d], d, d, &mut rng).with_grad());
            head_b.push(Tensor::zeros(vec![d]).with_grad());
        }
        CpcModel {
            config,
            enc_w,
            enc_b,
            agg_w,
            agg_b,
            head_w,
            head_b,
        }
    }

    pub fn init_zero(config: CpcConfig) -> CpcModel<T> {
        let mut m = Self::init(config, 0);
        for (_, t) in m.named_params_mut() {
            for v in t.data_mut() {
                *v = T::zero();
            }
        }
        m
    }

    pub fn context_dim(&self) -> usize {
        self.config.channels
    }
}

/// Tape bindings of the model parameters, shared across the utterances of
/// one step.
pub struct CpcBinding {
    enc: Vec<(NodeId, NodeId)>,
    agg: Vec<(NodeId, NodeId)>,
    heads: Vec<(NodeId, NodeId)>,
}

impl<T: Scalar> CpcModel<T> {
    pub fn bind(&self, tape: &mut Tape<T>) -> CpcBinding {
        CpcBinding {
            enc: self
                .enc_w
                .iter()
                .zip(&self.enc_b)
                .map(|(w, b)| (tape.param(w), tape.param(b)))
                .collect(),
            agg: self
                .agg_w
                .iter()
                .zip(&self.agg_b)
                .map(|(w, b)| (tape.param(w), tape.param(b)))
                .collect(),
            heads: self
                .head_w
                .iter()
                .zip(&self.head_b)
                .map(|(w, b)| (tape.param(w), tape.param(b)))
                .collect(),
        }
    }

    /// Encoder + aggregator forward on an existing tape. Returns latent and
    /// context node ids (both frames x channels).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        binding: &CpcBinding,
        w: &Waveform,
    ) -> Result<(NodeId, NodeId), SslError> {
        if self.config.frame_count(w.len()) == 0 || w.len() < self.config.encoder[0].kernel {
            return Err(SslError::WaveformTooShort);
        }
        let samples: Vec<T> = w.samples().iter().map(|&s| T::from_f64(s)).collect();
        let mut x = tape.input(Tensor::from_vec(vec![samples.len(), 1], samples));
        for (spec, &(wid, bid)) in self.config.encoder.iter().zip(&binding.enc) {
            let t_in = tape.value(x).shape()[0];
            let t_out = t_in.div_ceil(spec.stride);
            let pad_total = ((t_out - 1) * spec.stride + spec.kernel).saturating_sub(t_in);
            let pad_left = pad_total / 2;
            let pad_right = pad_total - pad_left;
            let conv = tape.conv1d(x, wid, bid, spec.stride, pad_left, pad_right)?;
            x = tape.relu(conv)?;
        }
        let z = x;
        let c = self.aggregate_on_tape(tape, binding, z)?;
        Ok((z, c))
    }

    /// Aggregator-only forward from an arbitrary latent node (used to embed
    /// quantized latents).
    pub fn aggregate_on_tape(
        &self,
        tape: &mut Tape<T>,
        binding: &CpcBinding,
        latents: NodeId,
    ) -> Result<NodeId, SslError> {
        let mut c = latents;
        for &(wid, bid) in &binding.agg {
            // Causal: pad two frames on the left only.
            let conv = tape.conv1d(c, wid, bid, 1, 2, 0)?;
            c = tape.relu(conv)?;
        }
        Ok(c)
    }

    /// Convenience single-utterance forward returning value tensors.
    pub fn forward(&self, w: &Waveform) -> Result<(Tensor<T>, Tensor<T>), SslError> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let (z, c) = self.forward_on_tape(&mut tape, &binding, w)?;
        Ok((tape.value(z).clone(), tape.value(c).clone()))
    }

    /// Contrastive loss nodes for one sequence: returns the summed negative
    /// log-sigmoid node and the number of sigmoid terms it covers.
    pub fn loss_terms_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        binding: &CpcBinding,
        z: NodeId,
        c: NodeId,
        rng: &mut R,
    ) -> Result<(NodeId, usize), SslError> {
        let frames = tape.value(z).shape()[0];
        let k_max = self.config.steps;
        if frames <= k_max {
            return Err(SslError::SequenceTooShort {
                frames,
                min: k_max,
            });
        }
        let n_neg = self.config.negatives;
        let mut parts: Vec<NodeId> = Vec::new();
        let mut terms = 0usize;
        for k in 1..=k_max {
            let len = frames - k;
            let ctx_rows: Vec<usize> = (0..len).collect();
            let pos_rows: Vec<usize> = (k..frames).collect();
            let ctx = tape.gather(c, &ctx_rows)?;
            let (hw, hb) = binding.heads[k - 1];
            let pred = tape.affine(ctx, hw, hb)?;
            let pos = tape.gather(z, &pos_rows)?;
            let pos_logit = tape.row_dot(pred, pos)?;
            let pos_ls = tape.log_sigmoid(pos_logit)?;
            parts.push(tape.sum_all(pos_ls)?);
            terms += len;
            for _ in 0..n_neg {
                // Uniform over the other frames of the same sequence.
                let ids: Vec<usize> = (0..len)
                    .map(|i| {
                        let target = i + k;
                        let r = rng.gen_range(0..frames - 1);
                        if r >= target {
                            r + 1
                        } else {
                            r
                        }
                    })
                    .collect();
                let neg = tape.gather(z, &ids)?;
                let neg_logit = tape.row_dot(pred, neg)?;
                let neg_neg = tape.scale(neg_logit, -1.0)?;
                let neg_ls = tape.log_sigmoid(neg_neg)?;
                parts.push(tape.sum_all(neg_ls)?);
                terms += len;
            }
        }
        let total = concat_sum(tape, &parts)?;
        Ok((total, terms))
    }

    /// Normalized contrastive loss of one waveform (per sigmoid term).
    pub fn loss<R: Rng>(&self, w: &Waveform, rng: &mut R) -> Result<f64, SslError> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let (z, c) = self.forward_on_tape(&mut tape, &binding, w)?;
        let (total, terms) = self.loss_terms_on_tape(&mut tape, &binding, z, c, rng)?;
        let loss = tape.scale(total, -1.0 / terms as f64)?;
        Ok(tape.value(loss).data()[0].to_f64())
    }

    /// Mean normalized loss over a corpus with a fixed negative-sampling seed.
    pub fn mean_loss(&self, corpus: &[Waveform], seed: u64) -> Result<f64, SslError> {
        let mut acc = 0.0;
        for (i, w) in corpus.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            acc += self.loss(w, &mut rng)?;
        }
        Ok(acc / corpus.len() as f64)
    }
}

fn concat_sum<T: Scalar>(tape: &mut Tape<T>, parts: &[NodeId]) -> Result<NodeId, SslError> {
    let cat = tape.concat(parts, 0)?;
    Ok(tape.sum_all(cat)?)
}

/// One Adam update over a batch of waveforms; returns the normalized loss.
pub fn cpc_train_step<T: Scalar, R: Rng>(
    model: &mut CpcModel<T>,
    batch: &[&Waveform],
    adam: &mut Adam<T>,
    lr: f64,
    rng: &mut R,
) -> Result<f64, SslError> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let mut parts = Vec::new();
    let mut terms = 0usize;
    for w in batch {
        let (z, c) = model.forward_on_tape(&mut tape, &binding, w)?;
        let (part, t) = model.loss_terms_on_tape(&mut tape, &binding, z, c, rng)?;
        parts.push(part);
        terms += t;
    }
    let total = concat_sum(&mut tape, &parts)?;
    let loss = tape.scale(total, -1.0 / terms as f64)?;
    let loss_value = tape.value(loss).data()[0].to_f64();
    let grads = tape.backward(loss)?;

    let ids = binding_node_ids(&binding);
    let names: Vec<String> = param_names(model);
    let grad_tensors: Vec<Tensor<T>> = ids
        .iter()
        .map(|&id| grads.get_or_zeros(id, tape.value(id).shape()))
        .collect();
    let mut params = model.named_params_mut();
    let mut refs: Vec<(&str, &mut Tensor<T>)> = Vec::new();
    for ((name, tensor), expect) in params.iter_mut().zip(names.iter()) {
        debug_assert_eq!(*name, *expect);
        refs.push((expect.as_str(), *tensor));
    }
    adam.step(lr, &mut refs, &grad_tensors)?;
    Ok(loss_value)
}

fn binding_node_ids(binding: &CpcBinding) -> Vec<NodeId> {
    let mut ids = Vec::new();
    for &(w, b) in &binding.enc {
        ids.push(w);
        ids.push(b);
    }
    for &(w, b) in &binding.agg {
        ids.push(w);
        ids.push(b);
    }
    for &(w, b) in &binding.heads {
        ids.push(w);
        ids.push(b);
    }
    ids
}

fn param_names<T: Scalar>(model: &CpcModel<T>) -> Vec<String> {
    model
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect()
}

/// Pretrains (or continues pretraining) on a waveform corpus.
pub fn pretrain_cpc<T: Scalar>(
    model: &mut CpcModel<T>,
    corpus: &[Waveform],
    steps: usize,
    batch_size: usize,
    schedule: &Schedule,
    seed: u64,
    mut log: Option<&mut dyn FnMut(usize, f64, f64)>,
) -> Result<(), SslError> {
    if corpus.is_empty() {
        return Err(SslError::EmptyCorpus);
    }
    let mut adam = Adam::new(None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in 0..steps {
        let batch: Vec<&Waveform> = (0..batch_size)
            .map(|_| &corpus[rng.gen_range(0..corpus.len())])
            .collect();
        let lr = schedule.rate_at(step as u64);
        let loss = cpc_train_step(model, &batch, &mut adam, lr, &mut rng)?;
        if let Some(log) = log.as_mut() {
            log(step, loss, lr);
        }
    }
    Ok(())
}

impl<T: Scalar> ParamModel<T> for CpcModel<T> {
    fn arch_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "cpc",
            "config": self.config,
        })
    }

    fn vocab_fingerprint(&self) -> Option<String> {
        None
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.enc_w.iter().zip(&self.enc_b).enumerate() {
            out.push((format!("enc.{i}.w"), w));
            out.push((format!("enc.{i}.b"), b));
        }
        for (i, (w, b)) in self.agg_w.iter().zip(&self.agg_b).enumerate() {
            out.push((format!("agg.{i}.w"), w));
            out.push((format!("agg.{i}.b"), b));
        }
        for (i, (w, b)) in self.head_w.iter().zip(&self.head_b).enumerate() {
            out.push((format!("head.{i}.w"), w));
            out.push((format!("head.{i}.b"), b));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, (w, b)) in self.enc_w.iter_mut().zip(self.enc_b.iter_mut()).enumerate() {
            out.push((format!("enc.{i}.w"), w));
            out.push((format!("enc.{i}.b"), b));
        }
        for (i, (w, b)) in self.agg_w.iter_mut().zip(self.agg_b.iter_mut()).enumerate() {
            out.push((format!("agg.{i}.w"), w));
            out.push((format!("agg.{i}.b"), b));
        }
        for (i, (w, b)) in self.head_w.iter_mut().zip(self.head_b.iter_mut()).enumerate() {
            out.push((format!("head.{i}.w"), w));
            out.push((format!("head.{i}.b"), b));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(samples: usize) -> Waveform {
        let data: Vec<f64> = (0..samples)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 500.0 * n as f64 / 16000.0).sin())
            .collect();
        Waveform::new(data).unwrap()
    }

    #[test]
    fn one_second_gives_100_frames() {
        let config = CpcConfig::default();
        assert_eq!(config.total_stride(), 160);
        assert_eq!(config.frame_count(16_000), 100);
        let model: CpcModel<f64> = CpcModel::init(config, 1);
        let (z, c) = model.forward(&tone(16_000)).unwrap();
        assert_eq!(z.shape(), &[100, 64]);
        assert_eq!(c.shape(), &[100, 64]);
    }

    #[test]
    fn zero_model_gives_zero_latents_and_contexts() {
        let model: CpcModel<f64> = CpcModel::init_zero(CpcConfig::default());
        let w = Waveform::new(vec![0.0; 8000]).unwrap();
        let (z, c) = model.forward(&w).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contexts_are_causal_within_receptive_field() {
        let config = CpcConfig {
            channels: 16,
            ..CpcConfig::default()
        };
        let model: CpcModel<f64> = CpcModel::init(config, 3);
        let base = tone(16_000);
        let mut perturbed = base.samples().to_vec();
        for v in perturbed[16 * 160..].iter_mut() {
            *v = -*v * 0.9 + 0.05;
        }
        let (_, c1) = model.forward(&base).unwrap();
        let (_, c2) = model.forward(&Waveform::new(perturbed).unwrap()).unwrap();
        for t in 0..8 {
            for d in 0..16 {
                let a = c1.row(t)[d];
                let b = c2.row(t)[d];
                assert!(
                    (a - b).abs() < 1e-12,
                    "context frame {t} dim {d} changed: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn zero_init_loss_is_ln_2() {
        let model: CpcModel<f64> = CpcModel::init_zero(CpcConfig {
            channels: 8,
            ..CpcConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = model.loss(&tone(8000), &mut rng).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_oracle_embeddings_drive_loss_to_zero() {
        // Two frames, K=1, identity head: pred_0 = c_0 = 10, z = [-1, 1],
        // so the positive dot is +10 and every negative dot is -10.
        let config = CpcConfig {
            channels: 1,
            steps: 1,
            negatives: 10,
            ..CpcConfig::default()
        };
        let mut model: CpcModel<f64> = CpcModel::init_zero(config);
        for (name, t) in model.named_params_mut() {
            if name == "head.0.w" {
                t.data_mut()[0] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let z = tape.input(Tensor::from_vec(vec![2, 1], vec![-1.0, 1.0]));
        let c = tape.input(Tensor::from_vec(vec![2, 1], vec![10.0, 10.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (total, terms) = model
            .loss_terms_on_tape(&mut tape, &binding, z, c, &mut rng)
            .unwrap();
        let loss = tape.scale(total, -1.0 / terms as f64).unwrap();
        let v = tape.value(loss).data()[0];
        assert!(v.abs() < 1e-3, "saturated loss should be ~0, got {v}");
    }

    #[test]
    fn loss_matches_straight_loop_recomputation() {
        let config = CpcConfig {
            channels: 6,
            steps: 4,
            negatives: 3,
            ..CpcConfig::default()
        };
        let model: CpcModel<f64> = CpcModel::init(config.clone(), 9);
        let w = tone(3300); // ~20 frames
        let (z, c) = model.forward(&w).unwrap();
        let frames = z.shape()[0];
        assert!(frames > config.steps);

        let loss = model.loss(&w, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();

        // Straight-loop oracle with the same negative draws.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = config.channels;
        let heads: Vec<(&Tensor<f64>, &Tensor<f64>)> =
            model.head_w.iter().zip(model.head_b.iter()).collect();
        let mut acc = 0.0;
        let mut terms = 0usize;
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        for k in 1..=config.steps {
            let len = frames - k;
            let mut preds = vec![0.0; len * d];
            for i in 0..len {
                let (hw, hb) = heads[k - 1];
                for o in 0..d {
                    let mut acc2 = hb.data()[o];
                    for j in 0..d {
                        acc2 += c.row(i)[j] * hw.data()[j * d + o];
                    }
                    preds[i * d + o] = acc2;
                }
            }
            for i in 0..len {
                let dot: f64 = (0..d).map(|j| preds[i * d + j] * z.row(i + k)[j]).sum();
                acc += -sigmoid(dot).ln();
                terms += 1;
            }
            for _ in 0..config.negatives {
                for i in 0..len {
                    let target = i + k;
                    let r = rng.gen_range(0..frames - 1);
                    let neg = if r >= target { r + 1 } else { r };
                    let dot: f64 = (0..d).map(|j| preds[i * d + j] * z.row(neg)[j]).sum();
                    acc += -sigmoid(-dot).ln();
                    terms += 1;
                }
            }
        }
        let oracle = acc / terms as f64;
        assert!(
            (loss - oracle).abs() < 1e-10,
            "tape loss {loss} vs loop oracle {oracle}"
        );
    }

    #[test]
    fn too_short_sequence_rejected() {
        let model: CpcModel<f64> = CpcModel::init(CpcConfig::default(), 2);
        // 12 steps need more than 12 frames; 1600 samples -> 10 frames.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            model.loss(&tone(1600), &mut rng),
            Err(SslError::SequenceTooShort { .. })
        ));
    }
}
