//! Tape forward passes: batched encoder and teacher-forced decoder.

use crate::audio::FeatureSequence;
use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::text::vocab::{BOS, EOS};

use super::{ModelBinding, Seq2SeqError, Seq2SeqModel};

/// Encoder output bound on a tape: time-major stacked states (row t*B + b)
/// plus per-example valid lengths.
pub struct EncodedNodes {
    pub states: NodeId,
    pub t_out: usize,
    pub batch: usize,
    pub valid: Vec<usize>,
}

/// Decoder parameter node ids, shared between the BiLSTM and hybrid models.
pub struct DecoderNodes {
    pub embed: NodeId,
    pub lstm: Vec<(NodeId, NodeId, NodeId)>,
    pub mem_w: NodeId,
    pub mem_b: NodeId,
    pub query_w: NodeId,
    pub query_b: NodeId,
    pub v_w: NodeId,
    pub v_b: NodeId,
    pub comb_w: NodeId,
    pub comb_b: NodeId,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderDims {
    pub layers: usize,
    pub hidden: usize,
    pub enc_dim: usize,
    pub vocab: usize,
}

pub fn decoder_nodes(binding: &ModelBinding, dec_layers: usize) -> DecoderNodes {
    DecoderNodes {
        embed: binding.node("dec.embed"),
        lstm: (0..dec_layers)
            .map(|l| {
                (
                    binding.node(&format!("dec.lstm{l}.w_ih")),
                    binding.node(&format!("dec.lstm{l}.w_hh")),
                    binding.node(&format!("dec.lstm{l}.bias")),
                )
            })
            .collect(),
        mem_w: binding.node("dec.attn.mem.w"),
        mem_b: binding.node("dec.attn.mem.b"),
        query_w: binding.node("dec.attn.query.w"),
        query_b: binding.node("dec.attn.query.b"),
        v_w: binding.node("dec.attn.v.w"),
        v_b: binding.node("dec.attn.v.b"),
        comb_w: binding.node("dec.comb.w"),
        comb_b: binding.node("dec.comb.b"),
        proj_w: binding.node("proj.w"),
        proj_b: binding.node("proj.b"),
    }
}

/// Runs the batched encoder. Features are padded with zeros to the longest
/// example; masking keeps every example's states identical to what a
/// trimmed batch would produce.
pub fn encode_batch_on_tape<T: Scalar>(
    model: &Seq2SeqModel<T>,
    tape: &mut Tape<T>,
    binding: &ModelBinding,
    feats: &[&FeatureSequence],
) -> Result<EncodedNodes, Seq2SeqError> {
    if feats.is_empty() {
        return Err(Seq2SeqError::EmptyBatch);
    }
    let cfg = &model.config;
    let d = cfg.input_dim;
    for f in feats {
        if f.dim() != d {
            return Err(Seq2SeqError::FeatureDim {
                expected: d,
                found: f.dim(),
            });
        }
    }
    let b = feats.len();
    let lens: Vec<usize> = feats.iter().map(|f| f.num_frames()).collect();
    let t_max = *lens.iter().max().unwrap();

    // Padded (B*T) x D feature matrix, rows b-major.
    let mut data = vec![T::zero(); b * t_max * d];
    for (bi, f) in feats.iter().enumerate() {
        for t in 0..f.num_frames() {
            for (j, &v) in f.frame(t).iter().enumerate() {
                data[(bi * t_max + t) * d + j] = T::from_f64(v);
            }
        }
    }
    let x = tape.input(Tensor::from_vec(vec![b * t_max, d], data));

    // Two tanh input layers.
    let a0 = tape.affine(x, binding.node("enc.in0.w"), binding.node("enc.in0.b"))?;
    let t0 = tape.tanh(a0)?;
    let a1 = tape.affine(t0, binding.node("enc.in1.w"), binding.node("enc.in1.b"))?;
    let t1 = tape.tanh(a1)?;

    // Zero padded frames so the convolutions see the same zeros a trimmed
    // batch would.
    let w = cfg.input_width;
    let mut fm = vec![T::zero(); b * t_max * w];
    for (bi, &len) in lens.iter().enumerate() {
        for t in 0..len {
            for v in fm[(bi * t_max + t) * w..(bi * t_max + t + 1) * w].iter_mut() {
                *v = T::one();
            }
        }
    }
    let frame_mask = tape.input(Tensor::from_vec(vec![b * t_max, w], fm));
    let masked = tape.mul(t1, frame_mask)?;

    let img = tape.reshape(masked, vec![b, 1, t_max, w])?;
    let conv0 = tape.conv2d(
        img,
        binding.node("enc.conv0.w"),
        binding.node("enc.conv0.b"),
        (2, 2),
        (1, 1),
    )?;
    let r0 = tape.relu(conv0)?;

    // Zero the conv stack's padded frames as well (biases make them
    // nonzero otherwise).
    let c = cfg.conv_channels;
    let t2 = t_max.div_ceil(2);
    let f2 = w.div_ceil(2);
    let lens2: Vec<usize> = lens.iter().map(|&l| l.div_ceil(2)).collect();
    let mut cm = vec![T::zero(); b * c * t2 * f2];
    for (bi, &len) in lens2.iter().enumerate() {
        for ci in 0..c {
            for t in 0..len {
                let off = ((bi * c + ci) * t2 + t) * f2;
                for v in cm[off..off + f2].iter_mut() {
                    *v = T::one();
                }
            }
        }
    }
    let conv_mask = tape.input(Tensor::from_vec(vec![b, c, t2, f2], cm));
    let m0 = tape.mul(r0, conv_mask)?;

    let conv1 = tape.conv2d(
        m0,
        binding.node("enc.conv1.w"),
        binding.node("enc.conv1.b"),
        (2, 2),
        (1, 1),
    )?;
    let r1 = tape.relu(conv1)?;

    let t4 = t2.div_ceil(2);
    let lens4: Vec<usize> = lens2.iter().map(|&l| l.div_ceil(2)).collect();
    let tm = tape.to_time_major(r1)?;

    // Per-step inputs and masks.
    let h = cfg.enc_hidden;
    let mut xs: Vec<NodeId> = (0..t4)
        .map(|t| tape.gather(tm, &(t * b..(t + 1) * b).collect::<Vec<_>>()))
        .collect::<Result<_, _>>()?;
    let step_masks: Vec<NodeId> = (0..t4)
        .map(|t| {
            let mut m = vec![T::zero(); b * h];
            for (bi, &len) in lens4.iter().enumerate() {
                if t < len {
                    for v in m[bi * h..(bi + 1) * h].iter_mut() {
                        *v = T::one();
                    }
                }
            }
            tape.input(Tensor::from_vec(vec![b, h], m))
        })
        .collect();
    let zero_h = tape.input(Tensor::zeros(vec![b, h]));

    for l in 0..cfg.enc_layers {
        let run = |tape: &mut Tape<T>, dir: &str, order: Box<dyn Iterator<Item = usize>>| {
            let w_ih = binding.node(&format!("enc.lstm{l}.{dir}.w_ih"));
            let w_hh = binding.node(&format!("enc.lstm{l}.{dir}.w_hh"));
            let bias = binding.node(&format!("enc.lstm{l}.{dir}.bias"));
            let mut hn = zero_h;
            let mut cn = zero_h;
            let mut outs = vec![0usize; t4];
            for t in order {
                let out = tape.lstm_cell(xs[t], hn, cn, w_ih, w_hh, bias)?;
                let h_raw = tape.slice_cols(out, 0, h)?;
                let c_raw = tape.slice_cols(out, h, 2 * h)?;
                hn = tape.mul(h_raw, step_masks[t])?;
                cn = tape.mul(c_raw, step_masks[t])?;
                outs[t] = hn;
            }
            Ok::<Vec<NodeId>, Seq2SeqError>(outs)
        };
        let fwd = run(tape, "fwd", Box::new(0..t4))?;
        let bwd = run(tape, "bwd", Box::new((0..t4).rev()))?;
        let mut next = Vec::with_capacity(t4);
        for t in 0..t4 {
            next.push(tape.concat(&[fwd[t], bwd[t]], 1)?);
        }
        xs = next;
    }
    let states = tape.concat(&xs, 0)?;
    Ok(EncodedNodes {
        states,
        t_out: t4,
        batch: b,
        valid: lens4,
    })
}

/// Teacher-forced decoding over an encoded batch. Returns the summed
/// cross-entropy node, the number of scored tokens, and the per-step CE
/// vectors (B entries each; padded positions contribute zero).
pub fn teacher_forced_ce<T: Scalar>(
    tape: &mut Tape<T>,
    dec: &DecoderNodes,
    dims: &DecoderDims,
    enc: &EncodedNodes,
    targets: &[&[usize]],
) -> Result<(NodeId, usize, Vec<NodeId>), Seq2SeqError> {
    let b = enc.batch;
    if targets.len() != b {
        return Err(Seq2SeqError::EmptyBatch);
    }
    for tgt in targets {
        if let Some(&bad) = tgt.iter().find(|&&t| t >= dims.vocab) {
            return Err(Seq2SeqError::TokenOutOfRange {
                id: bad,
                vocab: dims.vocab,
            });
        }
    }
    let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
    let enc_proj_raw = tape.affine(enc.states, dec.mem_w, dec.mem_b)?;

    let zero_hd = tape.input(Tensor::zeros(vec![b, dims.hidden]));
    let zero_ctx = tape.input(Tensor::zeros(vec![b, dims.enc_dim]));
    let mut layer_state: Vec<(NodeId, NodeId)> = vec![(zero_hd, zero_hd); dims.layers];
    let mut ctx = zero_ctx;

    let mut count = 0usize;
    let mut ce_nodes = Vec::with_capacity(steps);
    for s in 0..steps {
        let prev_ids: Vec<usize> = targets
            .iter()
            .map(|t| if s == 0 { BOS } else { *t.get(s - 1).unwrap_or(&crate::text::vocab::PAD) })
            .collect();
        let out_ids: Vec<Option<usize>> = targets
            .iter()
            .map(|t| {
                if s < t.len() {
                    Some(t[s])
                } else if s == t.len() {
                    Some(EOS)
                } else {
                    None
                }
            })
            .collect();
        count += out_ids.iter().flatten().count();

        let emb = tape.gather(dec.embed, &prev_ids)?;
        let mut x = tape.concat(&[emb, ctx], 1)?;
        for (l, &(w_ih, w_hh, bias)) in dec.lstm.iter().enumerate() {
            let (hp, cp) = layer_state[l];
            let out = tape.lstm_cell(x, hp, cp, w_ih, w_hh, bias)?;
            let hn = tape.slice_cols(out, 0, dims.hidden)?;
            let cn = tape.slice_cols(out, dims.hidden, 2 * dims.hidden)?;
            layer_state[l] = (hn, cn);
            x = hn;
        }
        let (weights, new_ctx) = attention_step(tape, dec, enc, x, enc_proj_raw)?;
        let _ = weights;
        ctx = new_ctx;
        let cat = tape.concat(&[x, ctx], 1)?;
        let comb_raw = tape.affine(cat, dec.comb_w, dec.comb_b)?;
        let comb = tape.tanh(comb_raw)?;
        let logits = tape.affine(comb, dec.proj_w, dec.proj_b)?;
        ce_nodes.push(tape.cross_entropy_rows(logits, out_ids)?);
    }
    let cat = tape.concat(&ce_nodes, 0)?;
    let total = tape.sum_all(cat)?;
    Ok((total, count, ce_nodes))
}

/// Additive attention over time-major stacked encoder states: weights
/// (B x T') and the context vectors (B x enc_dim).
pub fn attention_step<T: Scalar>(
    tape: &mut Tape<T>,
    dec: &DecoderNodes,
    enc: &EncodedNodes,
    query: NodeId,
    enc_proj: NodeId,
) -> Result<(NodeId, NodeId), Seq2SeqError> {
    let qp = tape.affine(query, dec.query_w, dec.query_b)?;
    let summed = tape.add_tiled(enc_proj, qp)?;
    let th = tape.tanh(summed)?;
    let scores = tape.affine(th, dec.v_w, dec.v_b)?;
    let by_time = tape.reshape(scores, vec![enc.t_out, enc.batch])?;
    let by_batch = tape.transpose(by_time)?;
    let weights = tape.masked_softmax(by_batch, enc.valid.clone())?;
    let ctx = tape.tiled_weighted_sum(weights, enc.states)?;
    Ok((weights, ctx))
}

/// Per-example summed CE losses read back from the per-step CE nodes.
pub fn per_example_losses<T: Scalar>(tape: &Tape<T>, ce_nodes: &[NodeId], batch: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch];
    for &n in ce_nodes {
        let v = tape.value(n);
        for (bi, slot) in out.iter_mut().enumerate() {
            *slot += v.data()[bi].to_f64();
        }
    }
    out
}
