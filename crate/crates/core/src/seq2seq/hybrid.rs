//! Hybrid architecture: a pretrained masked LM as the encoder over discrete
//! code sequences, bridged into the same attention decoder as the BiLSTM
//! model.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::ssl::mlm::{MaskedLmModel, MlmConfig};
use crate::transfer::{load_model_params, Checkpoint, CheckpointError, ParamModel};

use super::forward::{decoder_nodes, DecoderDims, DecoderNodes, EncodedNodes};
use super::infer::{DecoderParams, Encoded};
use super::{ModelBinding, Seq2SeqError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    pub mlm: MlmConfig,
    pub enc_hidden: usize,
    pub dec_layers: usize,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub vocab: usize,
    pub freeze_encoder: bool,
}

impl Default for HybridConfig {
    fn default() -> HybridConfig {
        HybridConfig {
            mlm: MlmConfig::default(),
            enc_hidden: 128,
            dec_layers: 2,
            dec_hidden: 256,
            attn_dim: 128,
            embed_dim: 64,
            vocab: 32,
            freeze_encoder: false,
        }
    }
}

impl HybridConfig {
    pub fn enc_state_dim(&self) -> usize {
        2 * self.enc_hidden
    }
}

#[derive(Debug, Clone)]
pub struct HybridModel<T> {
    pub config: HybridConfig,
    pub mlm: MaskedLmModel<T>,
    params: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
    fingerprint: Option<String>,
}

/// Prefix under which the masked-LM encoder's tensors are persisted.
pub const MLM_PREFIX: &str = "enc.mlm.";

impl<T: Scalar> HybridModel<T> {
    fn fresh(config: HybridConfig, fingerprint: Option<String>, seed: u64) -> HybridModel<T> {
        let mlm = MaskedLmModel::init(config.mlm.clone(), seed ^ 0x1111);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<(String, Tensor<T>)> = Vec::new();
        let width = config.mlm.width;
        let h2 = config.enc_state_dim();
        let hd = config.dec_hidden;
        let a = config.attn_dim;
        let e = config.embed_dim;
        let v = config.vocab;
        let push_affine = |params: &mut Vec<(String, Tensor<T>)>,
                               name: &str,
                               i: usize,
                               o: usize,
                               rng: &mut ChaCha8Rng| {
            params.push((
                format!("{name}.w"),
                Tensor::glorot(vec![i, o], i, o, rng).with_grad(),
            ));
            params.push((format!("{name}.b"), Tensor::zeros(vec![o]).with_grad()));
        };
        push_affine(&mut params, "enc.bridge", width, h2, &mut rng);
        params.push((
            "dec.embed".into(),
            Tensor::glorot(vec![v, e], v, e, &mut rng).with_grad(),
        ));
        for l in 0..config.dec_layers {
            let in_dim = if l == 0 { e + h2 } else { hd };
            params.push((
                format!("dec.lstm{l}.w_ih"),
                Tensor::glorot(vec![in_dim, 4 * hd], in_dim, 4 * hd, &mut rng).with_grad(),
            ));
            params.push((
                format!("dec.lstm{l}.w_hh"),
                Tensor::glorot(vec![hd, 4 * hd], hd, 4 * hd, &mut rng).with_grad(),
            ));
            let mut bias = Tensor::zeros(vec![4 * hd]);
            for j in hd..2 * hd {
                bias.data_mut()[j] = T::one();
            }
            params.push((format!("dec.lstm{l}.bias"), bias.with_grad()));
        }
        push_affine(&mut params, "dec.attn.mem", h2, a, &mut rng);
        push_affine(&mut params, "dec.attn.query", hd, a, &mut rng);
        push_affine(&mut params, "dec.attn.v", a, 1, &mut rng);
        push_affine(&mut params, "dec.comb", hd + h2, hd, &mut rng);
        push_affine(&mut params, "proj", hd, v, &mut rng);
        let index = params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        HybridModel {
            config,
            mlm,
            params,
            index,
            fingerprint,
        }
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        &self.params[self.index[name]].1
    }

    /// Training for this architecture follows the polynomial-decay schedule
    /// with a 5e-5 peak.
    pub fn default_schedule(total_steps: u64) -> crate::numerics::Schedule {
        crate::numerics::Schedule::polynomial(5e-5, total_steps / 10, total_steps.max(1), 0.0)
            .expect("warmup below total")
    }

    /// Binds the decoder-side parameters; the masked-LM encoder binds
    /// separately (frozen or trainable per configuration).
    pub fn bind_own(&self, tape: &mut Tape<T>) -> ModelBinding {
        let nodes = self.params.iter().map(|(_, t)| tape.param(t)).collect();
        ModelBinding::new(nodes, self.index.clone())
    }

    pub fn decoder_dims(&self) -> DecoderDims {
        DecoderDims {
            layers: self.config.dec_layers,
            hidden: self.config.dec_hidden,
            enc_dim: self.config.enc_state_dim(),
            vocab: self.config.vocab,
        }
    }

    /// Encodes a batch of code sequences into time-major stacked states.
    pub fn encode_codes_on_tape(
        &self,
        tape: &mut Tape<T>,
        binding: &ModelBinding,
        mlm_binding: &crate::ssl::mlm::MlmBinding,
        codes: &[&[usize]],
    ) -> Result<EncodedNodes, Seq2SeqError> {
        if codes.is_empty() {
            return Err(Seq2SeqError::EmptyBatch);
        }
        let b = codes.len();
        let lens: Vec<usize> = codes.iter().map(|c| c.len()).collect();
        let t_max = *lens.iter().max().unwrap();
        let bridge_w = binding.node("enc.bridge.w");
        let bridge_b = binding.node("enc.bridge.b");
        let mut per_example: Vec<NodeId> = Vec::with_capacity(b);
        for seq in codes {
            let hidden = self.mlm.hidden_on_tape(tape, mlm_binding, seq)?;
            per_example.push(tape.affine(hidden, bridge_w, bridge_b)?);
        }
        let zero_row = tape.input(Tensor::zeros(vec![1, self.config.enc_state_dim()]));
        let mut time_blocks: Vec<NodeId> = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let rows: Vec<NodeId> = per_example
                .iter()
                .enumerate()
                .map(|(bi, &st)| {
                    if t < lens[bi] {
                        tape.gather(st, &[t])
                    } else {
                        Ok(zero_row)
                    }
                })
                .collect::<Result<_, _>>()?;
            time_blocks.push(tape.concat(&rows, 0)?);
        }
        let states = tape.concat(&time_blocks, 0)?;
        Ok(EncodedNodes {
            states,
            t_out: t_max,
            batch: b,
            valid: lens,
        })
    }

    pub fn decoder_nodes(&self, binding: &ModelBinding) -> DecoderNodes {
        decoder_nodes(binding, self.config.dec_layers)
    }

    /// Single-sequence encoding for inference.
    pub fn encode_single(&self, codes: &[usize]) -> Result<Encoded<T>, Seq2SeqError> {
        let mut tape = Tape::new();
        let binding = self.bind_own(&mut tape);
        let mlm_binding = self.mlm.bind_with(&mut tape, false);
        let enc = self.encode_codes_on_tape(&mut tape, &binding, &mlm_binding, &[codes])?;
        let dec = self.decoder_nodes(&binding);
        let proj = tape.affine(enc.states, dec.mem_w, dec.mem_b)?;
        Ok(Encoded {
            states: tape.value(enc.states).clone(),
            enc_proj: tape.value(proj).clone(),
        })
    }

    pub fn decoder_params(&self) -> DecoderParams<'_, T> {
        DecoderParams {
            embed: self.param("dec.embed"),
            lstm: (0..self.config.dec_layers)
                .map(|l| {
                    (
                        self.param(&format!("dec.lstm{l}.w_ih")),
                        self.param(&format!("dec.lstm{l}.w_hh")),
                        self.param(&format!("dec.lstm{l}.bias")),
                    )
                })
                .collect(),
            mem_w: self.param("dec.attn.mem.w"),
            mem_b: self.param("dec.attn.mem.b"),
            query_w: self.param("dec.attn.query.w"),
            query_b: self.param("dec.attn.query.b"),
            v_w: self.param("dec.attn.v.w"),
            v_b: self.param("dec.attn.v.b"),
            comb_w: self.param("dec.comb.w"),
            comb_b: self.param("dec.comb.b"),
            proj_w: self.param("proj.w"),
            proj_b: self.param("proj.b"),
            dims: self.decoder_dims(),
            embed_dim: self.config.embed_dim,
        }
    }
}

/// Builds a hybrid model whose encoder weights come bitwise from a
/// masked-LM checkpoint; the decoder is freshly initialized.
pub fn build_hybrid<T: Scalar>(
    mlm_checkpoint: &Checkpoint,
    mut config: HybridConfig,
    fingerprint: Option<String>,
    seed: u64,
) -> Result<HybridModel<T>, CheckpointError> {
    let kind = mlm_checkpoint.arch_kind().unwrap_or("unknown");
    if kind != "mlm" {
        return Err(CheckpointError::WrongKind {
            expected: "mlm".into(),
            found: kind.into(),
        });
    }
    let mlm_config: MlmConfig =
        serde_json::from_value(mlm_checkpoint.meta.arch["config"].clone()).map_err(|e| {
            CheckpointError::Metadata {
                path: "<memory>".into(),
                msg: e.to_string(),
            }
        })?;
    config.mlm = mlm_config;
    let mut model = HybridModel::fresh(config, fingerprint, seed);
    load_model_params(&mut model.mlm, mlm_checkpoint)?;
    Ok(model)
}

impl<T: Scalar> ParamModel<T> for HybridModel<T> {
    fn arch_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "hybrid",
            "config": self.config,
        })
    }

    fn vocab_fingerprint(&self) -> Option<String> {
        self.fingerprint.clone()
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .mlm
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("{MLM_PREFIX}{n}"), t))
            .collect();
        out.extend(self.params.iter().map(|(n, t)| (n.clone(), t)));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = self
            .mlm
            .named_params_mut()
            .into_iter()
            .map(|(n, t)| (format!("{MLM_PREFIX}{n}"), t))
            .collect();
        out.extend(self.params.iter_mut().map(|(n, t)| (n.clone(), t)));
        out
    }
}
