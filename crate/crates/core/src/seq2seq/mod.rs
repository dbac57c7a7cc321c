//! Attention encoder-decoder for ASR and ST: two tanh input layers, two
//! strided 2-D convolutions, a bidirectional LSTM encoder, and an LSTM
//! decoder with additive attention and input feeding. Also hosts the hybrid
//! variant that reuses a pretrained masked LM as the encoder.

pub mod forward;
pub mod hybrid;
pub mod infer;
pub mod train;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::FeatureSequence;
use crate::numerics::{NodeId, Scalar, Tape, TapeError, Tensor};
use crate::transfer::ParamModel;

pub use hybrid::{build_hybrid, HybridConfig, HybridModel};
pub use infer::{encode_single, DecodeSession};
pub use train::{train_translator, Example, SourceData, TrainOptions, Translator};

#[derive(Debug, Error)]
pub enum Seq2SeqError {
    #[error("feature dimension {found} does not match the configured {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch contains an example with no target tokens")]
    EmptyTarget,
    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("non-finite loss at step {step} (examples {examples:?})")]
    NonFiniteLoss { step: usize, examples: Vec<String> },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Optim(#[from] crate::numerics::OptimError),
    #[error(transparent)]
    Ssl(#[from] crate::ssl::SslError),
    #[error(transparent)]
    Decode(#[from] crate::decode::DecodeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seq2SeqConfig {
    pub input_dim: usize,
    /// Width of the two tanh input layers.
    pub input_width: usize,
    pub conv_channels: usize,
    pub enc_layers: usize,
    /// Encoder hidden size per direction.
    pub enc_hidden: usize,
    pub dec_layers: usize,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub vocab: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Seq2SeqConfig {
        Seq2SeqConfig {
            input_dim: 80,
            input_width: 128,
            conv_channels: 16,
            enc_layers: 3,
            enc_hidden: 128,
            dec_layers: 2,
            dec_hidden: 256,
            attn_dim: 128,
            embed_dim: 64,
            vocab: 32,
        }
    }
}

impl Seq2SeqConfig {
    /// Frequency extent after the two stride-2 convolutions.
    pub fn conv_freq_out(&self) -> usize {
        self.input_width.div_ceil(2).div_ceil(2)
    }

    /// First encoder LSTM input size (flattened conv channels x frequency).
    pub fn lstm0_in(&self) -> usize {
        self.conv_channels * self.conv_freq_out()
    }

    /// Encoder state dimension (both directions).
    pub fn enc_state_dim(&self) -> usize {
        2 * self.enc_hidden
    }

    /// Time extent after the 4x reduction.
    pub fn time_out(&self, frames: usize) -> usize {
        frames.div_ceil(2).div_ceil(2)
    }
}

/// Padded training batch: features (or codes) plus lengths, and padded
/// target token sequences. Padding positions are excluded from the loss.
pub struct Batch<'a, T> {
    pub sources: Vec<SourceRef<'a, T>>,
    pub targets: Vec<&'a [usize]>,
    pub ids: Vec<&'a str>,
}

pub enum SourceRef<'a, T> {
    Features(&'a FeatureSequence, std::marker::PhantomData<T>),
    Codes(&'a [usize]),
}

/// The BiLSTM attention encoder-decoder. Parameters are stored as an ordered
/// named list; names are prefixed "enc.", "dec.", and "proj." so transfer
/// scopes reduce to name-prefix filters.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel<T> {
    pub config: Seq2SeqConfig,
    params: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
    fingerprint: Option<String>,
}

impl<T: Scalar> Seq2SeqModel<T> {
    pub fn init(config: Seq2SeqConfig, fingerprint: Option<String>, seed: u64) -> Seq2SeqModel<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<(String, Tensor<T>)> = Vec::new();
        let w = config.input_width;
        let c = config.conv_channels;
        let h = config.enc_hidden;
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
        let push_lstm = |params: &mut Vec<(String, Tensor<T>)>,
                         name: &str,
                         i: usize,
                         hidden: usize,
                         rng: &mut ChaCha8Rng| {
            params.push((
                format!("{name}.w_ih"),
                Tensor::glorot(vec![i, 4 * hidden], i, 4 * hidden, rng).with_grad(),
            ));
            params.push((
                format!("{name}.w_hh"),
                Tensor::glorot(vec![hidden, 4 * hidden], hidden, 4 * hidden, rng).with_grad(),
            ));
            // Forget-gate bias starts at 1.
            let mut bias = Tensor::zeros(vec![4 * hidden]);
            for j in hidden..2 * hidden {
                bias.data_mut()[j] = T::one();
            }
            params.push((format!("{name}.bias"), bias.with_grad()));
        };

        push_affine(&mut params, "enc.in0", config.input_dim, w, &mut rng);
        push_affine(&mut params, "enc.in1", w, w, &mut rng);
        params.push((
            "enc.conv0.w".into(),
            Tensor::glorot(vec![c, 1, 3, 3], 9, c, &mut rng).with_grad(),
        ));
        params.push(("enc.conv0.b".into(), Tensor::zeros(vec![c]).with_grad()));
        params.push((
            "enc.conv1.w".into(),
            Tensor::glorot(vec![c, c, 3, 3], 9 * c, c, &mut rng).with_grad(),
        ));
        params.push(("enc.conv1.b".into(), Tensor::zeros(vec![c]).with_grad()));
        for l in 0..config.enc_layers {
            let in_dim = if l == 0 { config.lstm0_in() } else { 2 * h };
            push_lstm(&mut params, &format!("enc.lstm{l}.fwd"), in_dim, h, &mut rng);
            push_lstm(&mut params, &format!("enc.lstm{l}.bwd"), in_dim, h, &mut rng);
        }
        params.push((
            "dec.embed".into(),
            Tensor::glorot(vec![v, e], v, e, &mut rng).with_grad(),
        ));
        for l in 0..config.dec_layers {
            let in_dim = if l == 0 { e + 2 * h } else { hd };
            push_lstm(&mut params, &format!("dec.lstm{l}"), in_dim, hd, &mut rng);
        }
        push_affine(&mut params, "dec.attn.mem", 2 * h, a, &mut rng);
        push_affine(&mut params, "dec.attn.query", hd, a, &mut rng);
        push_affine(&mut params, "dec.attn.v", a, 1, &mut rng);
        push_affine(&mut params, "dec.comb", hd + 2 * h, hd, &mut rng);
        push_affine(&mut params, "proj", hd, v, &mut rng);

        let index = params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Seq2SeqModel {
            config,
            params,
            index,
            fingerprint,
        }
    }

    pub fn init_zero(config: Seq2SeqConfig, fingerprint: Option<String>) -> Seq2SeqModel<T> {
        let mut m = Self::init(config, fingerprint, 0);
        for (_, t) in m.params.iter_mut() {
            for v in t.data_mut() {
                *v = T::zero();
            }
        }
        m
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        &self.params[self.index[name]]
            .1
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    /// Binds every parameter onto a tape; look nodes up by name.
    pub fn bind(&self, tape: &mut Tape<T>) -> ModelBinding {
        let nodes = self.params.iter().map(|(_, t)| tape.param(t)).collect();
        ModelBinding {
            nodes,
            index: self.index.clone(),
        }
    }
}

/// Node ids of bound parameters, addressable by parameter name.
pub struct ModelBinding {
    pub nodes: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl ModelBinding {
    pub(crate) fn new(nodes: Vec<NodeId>, index: HashMap<String, usize>) -> ModelBinding {
        ModelBinding { nodes, index }
    }

    pub fn node(&self, name: &str) -> NodeId {
        self.nodes[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

impl<T: Scalar> ParamModel<T> for Seq2SeqModel<T> {
    fn arch_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "seq2seq",
            "config": self.config,
        })
    }

    fn vocab_fingerprint(&self) -> Option<String> {
        self.fingerprint.clone()
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.params
            .iter_mut()
            .map(|(n, t)| (n.clone(), t))
            .collect()
    }
}
