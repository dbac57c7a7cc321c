// Scratch driver for sizing the synthetic ST task. Not part of the test
// suite; run with:  cargo run -p sslst-core --release --example tune

use std::time::Instant;

use sslst_core::audio::AugmentPolicy;
use sslst_core::corpus::{synth_corpus, SynthSpec};
use sslst_core::numerics::Schedule;
use sslst_core::seq2seq::train::{corpus_bleu, train_translator, Example, SourceData, TrainOptions, Translator};
use sslst_core::seq2seq::{Seq2SeqConfig, Seq2SeqModel};
use sslst_core::ssl::extract_features;
use sslst_core::audio::FeatureKind;
use sslst_core::ssl::SslModels;
use sslst_core::text::build_char_vocab;
use sslst_core::transfer::ParamModel;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let n_test: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(30);
    let mode: String = args.get(4).cloned().unwrap_or_else(|| "st".into());
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let spec = SynthSpec::default();
    let t0 = Instant::now();
    let train_corpus = synth_corpus(&spec, n_train, 100);
    let test_corpus = synth_corpus(&spec, n_test, 999);
    println!("synth: {:.2}s", t0.elapsed().as_secs_f64());

    let lines: Vec<String> = train_corpus
        .iter()
        .flat_map(|u| [u.transcript.clone(), u.translation.clone()])
        .collect();
    let vocab = build_char_vocab(&lines).unwrap();
    println!("vocab size {}", vocab.size());

    let models: SslModels<'_, f32> = SslModels::default();
    let to_examples = |corpus: &[sslst_core::corpus::SynthUtterance]| -> Vec<Example> {
        corpus
            .iter()
            .map(|u| Example {
                id: u.id.clone(),
                source: SourceData::Features(
                    extract_features(FeatureKind::LogMel, &models, &u.waveform)
                        .unwrap()
                        .normalized(),
                ),
                target: vocab.encode(if mode == "asr" { &u.transcript } else { &u.translation }),
            })
            .collect()
    };
    let t0 = Instant::now();
    let train_ex = to_examples(&train_corpus);
    let test_ex = to_examples(&test_corpus);
    println!("features: {:.2}s", t0.elapsed().as_secs_f64());

    let config = Seq2SeqConfig {
        input_dim: 80,
        input_width: 32,
        conv_channels: 4,
        enc_layers: 3,
        enc_hidden: 32,
        dec_layers: 2,
        dec_hidden: 64,
        attn_dim: 32,
        embed_dim: 16,
        vocab: vocab.size(),
    };
    let model: Seq2SeqModel<f32> =
        Seq2SeqModel::init(config, Some(vocab.fingerprint()), 7);
    println!(
        "params: {}",
        model
            .named_params()
            .iter()
            .map(|(_, t)| t.numel())
            .sum::<usize>()
    );
    let mut translator = Translator::BiLstm(model);

    let opts = TrainOptions {
        epochs,
        batch_frames: 800,
        schedule: Schedule::fixed(lr),
        clip_norm: Some(5.0),
        augment: AugmentPolicy::none(),
        seed: 11,
    };
    let start = Instant::now();
    train_translator(
        &mut translator,
        &train_ex,
        &opts,
        |epoch, m| {
            let t = Instant::now();
            let bleu = corpus_bleu(m, &test_ex, &vocab, 5, 30).unwrap();
            let sample: Vec<&Example> = train_ex.iter().take(8).collect();
            let (train_loss, _) = m.eval_loss(&sample).unwrap();
            let (hyp, _) = m.decode_source(&test_ex[0].source, 5, 30).unwrap();
            println!(
                "epoch {epoch}: test BLEU {bleu:.2} loss {train_loss:.4} hyp={:?} ref={:?} (train {:.1}s, eval {:.1}s)",
                vocab.decode(&hyp.tokens),
                vocab.decode(&test_ex[0].target),
                start.elapsed().as_secs_f64(),
                t.elapsed().as_secs_f64()
            );
            bleu >= 90.0
        },
        None,
    )
    .unwrap();
}
