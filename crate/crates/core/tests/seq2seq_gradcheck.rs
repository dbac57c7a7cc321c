//! Finite-difference check of the full seq2seq loss on a tiny instance.

use sslst_core::audio::{FeatureKind, FeatureSequence};
use sslst_core::numerics::Tape;
use sslst_core::seq2seq::forward::{
    decoder_nodes, encode_batch_on_tape, teacher_forced_ce, DecoderDims,
};
use sslst_core::seq2seq::{Seq2SeqConfig, Seq2SeqModel};
use sslst_core::transfer::ParamModel;

fn tiny_config() -> Seq2SeqConfig {
    Seq2SeqConfig {
        input_dim: 3,
        input_width: 4,
        conv_channels: 2,
        enc_layers: 2,
        enc_hidden: 3,
        dec_layers: 2,
        dec_hidden: 4,
        attn_dim: 3,
        embed_dim: 2,
        vocab: 7,
    }
}

fn features(vals: &[f64], dim: usize) -> FeatureSequence {
    FeatureSequence::new(vals.to_vec(), dim, 10.0, FeatureKind::LogMel)
}

fn loss_of(model: &Seq2SeqModel<f64>, feats: &[&FeatureSequence], targets: &[&[usize]]) -> f64 {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let enc = encode_batch_on_tape(model, &mut tape, &binding, feats).unwrap();
    let dec = decoder_nodes(&binding, model.config.dec_layers);
    let dims = DecoderDims {
        layers: model.config.dec_layers,
        hidden: model.config.dec_hidden,
        enc_dim: model.config.enc_state_dim(),
        vocab: model.config.vocab,
    };
    let (total, count, _) = teacher_forced_ce(&mut tape, &dec, &dims, &enc, targets).unwrap();
    let loss = tape.scale(total, 1.0 / count as f64).unwrap();
    tape.value(loss).data()[0]
}

#[test]
fn full_seq2seq_loss_matches_finite_differences() {
    let model: Seq2SeqModel<f64> = Seq2SeqModel::init(tiny_config(), None, 42);
    // Two frames, three dims; two target tokens.
    let f = features(&[0.3, -0.2, 0.5, -0.4, 0.1, 0.2], 3);
    let feats = [&f];
    let t: &[usize] = &[5, 6];
    let targets = [t];

    // Analytic gradients for every parameter.
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let enc = encode_batch_on_tape(&model, &mut tape, &binding, &feats).unwrap();
    let dec = decoder_nodes(&binding, model.config.dec_layers);
    let dims = DecoderDims {
        layers: model.config.dec_layers,
        hidden: model.config.dec_hidden,
        enc_dim: model.config.enc_state_dim(),
        vocab: model.config.vocab,
    };
    let (total, count, _) = teacher_forced_ce(&mut tape, &dec, &dims, &enc, &targets).unwrap();
    let loss = tape.scale(total, 1.0 / count as f64).unwrap();
    let grads = tape.backward(loss).unwrap();

    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let h = 1e-5;
    let mut checked = 0usize;
    for (pi, name) in names.iter().enumerate() {
        let node = binding.nodes[pi];
        let shape = model.named_params()[pi].1.shape().to_vec();
        let analytic = grads.get_or_zeros(node, &shape);
        let numel: usize = shape.iter().product();
        // Sample a handful of coordinates per tensor to keep runtime sane.
        let stride = (numel / 5).max(1);
        for j in (0..numel).step_by(stride) {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.named_params_mut()[pi].1.data_mut()[j] += delta;
                loss_of(&m, &feats, &targets)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < 1e-3,
                "{name}[{j}]: analytic {a} vs numeric {numeric} (rel {rel})"
            );
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} coordinates checked");
}

#[test]
fn per_example_loss_is_padding_invariant() {
    let model: Seq2SeqModel<f64> = Seq2SeqModel::init(tiny_config(), None, 7);
    let short = features(&[0.3, -0.2, 0.5, -0.4, 0.1, 0.2], 3); // 2 frames
    let long = features(
        &(0..30).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect::<Vec<_>>(),
        3,
    ); // 10 frames
    let t_short: &[usize] = &[5, 6];
    let t_long: &[usize] = &[6, 5, 5, 6];

    // Loss of the short example alone.
    let alone = per_example(&model, &[&short], &[t_short])[0];
    // Loss of the short example padded into a batch with a longer one.
    let batched = per_example(&model, &[&short, &long], &[t_short, t_long])[0];
    assert!(
        (alone - batched).abs() < 1e-5,
        "padding changed the per-example loss: {alone} vs {batched}"
    );

    fn per_example(
        model: &Seq2SeqModel<f64>,
        feats: &[&FeatureSequence],
        targets: &[&[usize]],
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let enc = encode_batch_on_tape(model, &mut tape, &binding, feats).unwrap();
        let dec = decoder_nodes(&binding, model.config.dec_layers);
        let dims = DecoderDims {
            layers: model.config.dec_layers,
            hidden: model.config.dec_hidden,
            enc_dim: model.config.enc_state_dim(),
            vocab: model.config.vocab,
        };
        let (_, _, ce) = teacher_forced_ce(&mut tape, &dec, &dims, &enc, targets).unwrap();
        sslst_core::seq2seq::forward::per_example_losses(&tape, &ce, feats.len())
    }
}
