//! Inference: single-utterance encoding and an autoregressive decode session
//! that plugs into the beam search.

use crate::audio::FeatureSequence;
use crate::decode::{DecodeError, StepDecoder};
use crate::numerics::kernels as kn;
use crate::numerics::{Scalar, Tape, Tensor};

use super::forward::{decoder_nodes, encode_batch_on_tape, DecoderDims};
use super::{ModelBinding, Seq2SeqError, Seq2SeqModel};

/// Frozen decoder parameter views used by the inference path.
pub struct DecoderParams<'a, T> {
    pub embed: &'a Tensor<T>,
    pub lstm: Vec<(&'a Tensor<T>, &'a Tensor<T>, &'a Tensor<T>)>,
    pub mem_w: &'a Tensor<T>,
    pub mem_b: &'a Tensor<T>,
    pub query_w: &'a Tensor<T>,
    pub query_b: &'a Tensor<T>,
    pub v_w: &'a Tensor<T>,
    pub v_b: &'a Tensor<T>,
    pub comb_w: &'a Tensor<T>,
    pub comb_b: &'a Tensor<T>,
    pub proj_w: &'a Tensor<T>,
    pub proj_b: &'a Tensor<T>,
    pub dims: DecoderDims,
    pub embed_dim: usize,
}

impl<T: Scalar> Seq2SeqModel<T> {
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
            dims: DecoderDims {
                layers: self.config.dec_layers,
                hidden: self.config.dec_hidden,
                enc_dim: self.config.enc_state_dim(),
                vocab: self.config.vocab,
            },
            embed_dim: self.config.embed_dim,
        }
    }
}

/// Encoder states of one utterance plus their attention projection.
pub struct Encoded<T> {
    pub states: Tensor<T>,
    pub enc_proj: Tensor<T>,
}

/// Encodes a single utterance through the tape path (shared with training).
pub fn encode_single<T: Scalar>(
    model: &Seq2SeqModel<T>,
    feats: &FeatureSequence,
) -> Result<Encoded<T>, Seq2SeqError> {
    let mut tape = Tape::new();
    let binding: ModelBinding = model.bind(&mut tape);
    let enc = encode_batch_on_tape(model, &mut tape, &binding, &[feats])?;
    let dec = decoder_nodes(&binding, model.config.dec_layers);
    let proj = tape.affine(enc.states, dec.mem_w, dec.mem_b)?;
    Ok(Encoded {
        states: tape.value(enc.states).clone(),
        enc_proj: tape.value(proj).clone(),
    })
}

/// Decoder state carried across steps.
#[derive(Clone)]
pub struct DecState<T> {
    layers: Vec<(Vec<T>, Vec<T>)>,
    ctx: Vec<T>,
}

/// Autoregressive decoding session over frozen encoder states.
pub struct DecodeSession<'a, T> {
    dp: DecoderParams<'a, T>,
    states: &'a Tensor<T>,
    enc_proj: &'a Tensor<T>,
}

impl<'a, T: Scalar> DecodeSession<'a, T> {
    pub fn new(
        dp: DecoderParams<'a, T>,
        encoded: &'a Encoded<T>,
    ) -> Result<DecodeSession<'a, T>, DecodeError> {
        if encoded.states.shape()[0] == 0 {
            return Err(DecodeError::EmptyEncoderOutput);
        }
        Ok(DecodeSession {
            dp,
            states: &encoded.states,
            enc_proj: &encoded.enc_proj,
        })
    }

    /// One step: log-probabilities over the vocabulary, the successor state,
    /// and the attention weights over encoder frames.
    pub fn step_full(
        &self,
        state: &DecState<T>,
        prev_token: usize,
    ) -> Result<(Vec<f64>, DecState<T>, Vec<f64>), DecodeError> {
        let dims = &self.dp.dims;
        if prev_token >= dims.vocab {
            return Err(DecodeError::TokenOutOfRange {
                id: prev_token,
                vocab: dims.vocab,
            });
        }
        let e = self.dp.embed_dim;
        let hd = dims.hidden;
        let t_enc = self.states.shape()[0];
        let a_dim = self.dp.query_w.shape()[1];

        // Input feeding: previous embedding concatenated with previous context.
        let mut x: Vec<T> = Vec::with_capacity(e + dims.enc_dim);
        x.extend_from_slice(self.dp.embed.row(prev_token));
        x.extend_from_slice(&state.ctx);

        let mut next = state.clone();
        for (l, (w_ih, w_hh, bias)) in self.dp.lstm.iter().enumerate() {
            let (h_prev, c_prev) = &state.layers[l];
            let mut h_new = vec![T::zero(); hd];
            let mut c_new = vec![T::zero(); hd];
            kn::lstm_cell_forward(
                &x,
                h_prev,
                c_prev,
                w_ih.data(),
                w_hh.data(),
                bias.data(),
                1,
                x.len(),
                hd,
                &mut h_new,
                &mut c_new,
            );
            next.layers[l] = (h_new.clone(), c_new);
            x = h_new;
        }
        let query = &x;

        // Additive attention scores.
        let mut qp = vec![T::zero(); a_dim];
        kn::matmul_nn_acc(query, self.dp.query_w.data(), 1, hd, a_dim, &mut qp);
        for (v, &b) in qp.iter_mut().zip(self.dp.query_b.data()) {
            *v += b;
        }
        let mut weights_t = vec![T::zero(); t_enc];
        for t in 0..t_enc {
            let mut th = vec![T::zero(); a_dim];
            for (j, v) in th.iter_mut().enumerate() {
                *v = (self.enc_proj.row(t)[j] + qp[j]).tanh();
            }
            let mut sc = vec![T::zero(); 1];
            kn::matmul_nn_acc(&th, self.dp.v_w.data(), 1, a_dim, 1, &mut sc);
            weights_t[t] = sc[0] + self.dp.v_b.data()[0];
        }
        kn::softmax_row(&mut weights_t);

        let mut ctx = vec![T::zero(); dims.enc_dim];
        for t in 0..t_enc {
            let row = self.states.row(t);
            let w = weights_t[t];
            for (c, &s) in ctx.iter_mut().zip(row) {
                *c += w * s;
            }
        }
        next.ctx = ctx.clone();

        let mut cat: Vec<T> = Vec::with_capacity(hd + dims.enc_dim);
        cat.extend_from_slice(query);
        cat.extend_from_slice(&ctx);
        let comb_out = self.dp.comb_w.shape()[1];
        let mut comb = vec![T::zero(); comb_out];
        kn::matmul_nn_acc(&cat, self.dp.comb_w.data(), 1, cat.len(), comb_out, &mut comb);
        for (v, &b) in comb.iter_mut().zip(self.dp.comb_b.data()) {
            *v = (*v + b).tanh();
        }
        let mut logits = vec![T::zero(); dims.vocab];
        kn::matmul_nn_acc(
            &comb,
            self.dp.proj_w.data(),
            1,
            comb_out,
            dims.vocab,
            &mut logits,
        );
        for (v, &b) in logits.iter_mut().zip(self.dp.proj_b.data()) {
            *v += b;
        }
        kn::log_softmax_row(&mut logits);
        let logprobs: Vec<f64> = logits.iter().map(|v| v.to_f64()).collect();
        let attn: Vec<f64> = weights_t.iter().map(|v| v.to_f64()).collect();
        Ok((logprobs, next, attn))
    }
}

impl<T: Scalar> StepDecoder for DecodeSession<'_, T> {
    type State = DecState<T>;

    fn vocab_size(&self) -> usize {
        self.dp.dims.vocab
    }

    fn start_state(&self) -> DecState<T> {
        DecState {
            layers: vec![
                (
                    vec![T::zero(); self.dp.dims.hidden],
                    vec![T::zero(); self.dp.dims.hidden],
                );
                self.dp.dims.layers
            ],
            ctx: vec![T::zero(); self.dp.dims.enc_dim],
        }
    }

    fn step(
        &self,
        state: &DecState<T>,
        prev_token: usize,
    ) -> Result<(Vec<f64>, DecState<T>), DecodeError> {
        self.step_full(state, prev_token)
            .map(|(lp, st, _)| (lp, st))
    }
}
