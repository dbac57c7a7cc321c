//! Checkpoint persistence, averaging, and scoped-transfer mechanics.

use sslst_core::numerics::Tensor;
use sslst_core::seq2seq::{Seq2SeqConfig, Seq2SeqModel};
use sslst_core::transfer::{
    average_checkpoints, checkpoint_from_model, load_model_params, read_checkpoint,
    transfer_parameters, write_checkpoint, Checkpoint, CheckpointError, ParamModel, TransferScope,
};

fn tiny_model(seed: u64, fingerprint: Option<&str>) -> Seq2SeqModel<f32> {
    Seq2SeqModel::init(
        Seq2SeqConfig {
            input_dim: 5,
            input_width: 8,
            conv_channels: 2,
            enc_layers: 1,
            enc_hidden: 4,
            dec_layers: 1,
            dec_hidden: 6,
            attn_dim: 4,
            embed_dim: 3,
            vocab: 9,
        },
        fingerprint.map(|s| s.to_string()),
        seed,
    )
}

fn params_of(model: &Seq2SeqModel<f32>) -> Vec<(String, Vec<f32>)> {
    model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect()
}

#[test]
fn save_load_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = tiny_model(3, Some("fp"));
    let ckpt = checkpoint_from_model(&model, 1234, 7);
    write_checkpoint(&path, &ckpt).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.meta.step, 1234);
    assert_eq!(back.meta.order, 7);

    let mut other = tiny_model(99, Some("fp"));
    load_model_params(&mut other, &back).unwrap();
    assert_eq!(params_of(&model), params_of(&other));
}

#[test]
fn truncated_file_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = checkpoint_from_model(&tiny_model(1, None), 0, 0);
    write_checkpoint(&path, &ckpt).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 13]).unwrap();
    match read_checkpoint(&path) {
        Err(CheckpointError::TruncatedAt { what, .. }) => {
            assert!(what.contains("proj"), "expected tensor name in {what:?}");
        }
        other => panic!("expected truncation error, got {other:?}"),
    }
}

#[test]
fn bad_magic_and_unknown_dtype_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("magic.ckpt");
    std::fs::write(&p1, b"NOTSST-rest").unwrap();
    assert!(matches!(
        read_checkpoint(&p1),
        Err(CheckpointError::Magic { .. })
    ));

    let p2 = dir.path().join("dtype.ckpt");
    let ckpt = checkpoint_from_model(&tiny_model(1, None), 0, 0);
    write_checkpoint(&p2, &ckpt).unwrap();
    let mut bytes = std::fs::read(&p2).unwrap();
    // Corrupt the first tensor's dtype tag: after magic(6) + meta len(4+n)
    // + count(4) + name len(4) + name bytes.
    let meta_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let name_len_at = 6 + 4 + meta_len + 4;
    let name_len = u32::from_le_bytes(bytes[name_len_at..name_len_at + 4].try_into().unwrap())
        as usize;
    let dtype_at = name_len_at + 4 + name_len;
    bytes[dtype_at] = 250;
    std::fs::write(&p2, bytes).unwrap();
    assert!(matches!(
        read_checkpoint(&p2),
        Err(CheckpointError::UnknownDType { tag: 250, .. })
    ));
}

#[test]
fn averaging_five_identical_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(5, None);
    let mut paths = Vec::new();
    for i in 0..5 {
        let p = dir.path().join(format!("c{i}.ckpt"));
        write_checkpoint(&p, &checkpoint_from_model(&model, 100 + i, i)).unwrap();
        paths.push(p);
    }
    let avg = average_checkpoints(&paths, 5).unwrap();
    let direct = checkpoint_from_model(&model, 104, 4);
    for (a, d) in avg.tensors.iter().zip(&direct.tensors) {
        assert_eq!(a.bytes, d.bytes, "tensor {} changed", a.name);
    }
    assert_eq!(avg.meta.step, 104);
}

#[test]
fn averaging_means_tensors_and_ignores_older_files() {
    let dir = tempfile::tempdir().unwrap();
    // Seven checkpoints whose first tensor is the constant (order as value);
    // averaging the last 5 must ignore orders 0 and 1.
    let model = tiny_model(6, None);
    let mut paths = Vec::new();
    for order in 0..7u64 {
        let mut ckpt = checkpoint_from_model(&model, order, order);
        let t0 = &mut ckpt.tensors[0];
        let numel: usize = t0.shape.iter().product();
        *t0 = sslst_core::transfer::CkptTensor::from_f64_values(
            &t0.name,
            t0.dtype,
            &t0.shape,
            &vec![order as f64; numel],
        );
        let p = dir.path().join(format!("c{order}.ckpt"));
        write_checkpoint(&p, &ckpt).unwrap();
        paths.push(p);
    }
    let avg = average_checkpoints(&paths, 5).unwrap();
    // Mean of 2..=6 is 4.
    for v in avg.tensors[0].to_f64_values() {
        assert_eq!(v, 4.0);
    }

    // Permutation invariance of the file list.
    let mut shuffled = paths.clone();
    shuffled.reverse();
    shuffled.swap(1, 4);
    let avg2 = average_checkpoints(&shuffled, 5).unwrap();
    assert_eq!(avg, avg2);
}

#[test]
fn averaging_two_scalars_halves() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(8, None);
    let mut paths = Vec::new();
    for (i, v) in [0.0f64, 2.0].iter().enumerate() {
        let mut ckpt = checkpoint_from_model(&model, i as u64, i as u64);
        for t in ckpt.tensors.iter_mut() {
            let numel: usize = t.shape.iter().product();
            *t = sslst_core::transfer::CkptTensor::from_f64_values(
                &t.name,
                t.dtype,
                &t.shape,
                &vec![*v; numel],
            );
        }
        let p = dir.path().join(format!("s{i}.ckpt"));
        write_checkpoint(&p, &ckpt).unwrap();
        paths.push(p);
    }
    let avg = average_checkpoints(&paths, 2).unwrap();
    for t in &avg.tensors {
        for v in t.to_f64_values() {
            assert_eq!(v, 1.0);
        }
    }
}

#[test]
fn averaging_is_linear_in_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(9, None);
    let base: Vec<Checkpoint> = (0..3)
        .map(|i| checkpoint_from_model(&model, i, i))
        .collect();
    let scale_ckpt = |c: &Checkpoint, s: f64| {
        let mut c = c.clone();
        for t in c.tensors.iter_mut() {
            let vals: Vec<f64> = t.to_f64_values().iter().map(|v| v * s).collect();
            *t = sslst_core::transfer::CkptTensor::from_f64_values(
                &t.name, t.dtype, &t.shape, &vals,
            );
        }
        c
    };
    let mut plain = Vec::new();
    let mut scaled = Vec::new();
    for (i, c) in base.iter().enumerate() {
        let p1 = dir.path().join(format!("p{i}.ckpt"));
        write_checkpoint(&p1, c).unwrap();
        plain.push(p1);
        let p2 = dir.path().join(format!("q{i}.ckpt"));
        write_checkpoint(&p2, &scale_ckpt(c, 3.0)).unwrap();
        scaled.push(p2);
    }
    let avg_plain = average_checkpoints(&plain, 3).unwrap();
    let avg_scaled = average_checkpoints(&scaled, 3).unwrap();
    for (a, b) in avg_plain.tensors.iter().zip(&avg_scaled.tensors) {
        for (x, y) in a.to_f64_values().iter().zip(b.to_f64_values()) {
            assert!((y - 3.0 * x).abs() < 1e-6);
        }
    }
}

#[test]
fn encoder_scope_leaves_decoder_untouched() {
    let source = tiny_model(10, Some("en"));
    let ckpt = checkpoint_from_model(&source, 50, 1);
    let mut target = tiny_model(20, Some("en"));
    let before = params_of(&target);

    transfer_parameters(&ckpt, &mut target, TransferScope::Encoder).unwrap();
    let after = params_of(&target);
    let src = params_of(&source);
    for (i, (name, vals)) in after.iter().enumerate() {
        if name.starts_with("enc.") {
            assert_eq!(vals, &src[i].1, "{name} should match the source");
        } else {
            assert_eq!(vals, &before[i].1, "{name} should be untouched");
        }
    }
}

#[test]
fn encoder_decoder_scope_copies_projection_with_matching_vocab() {
    let source = tiny_model(11, Some("shared-en"));
    let ckpt = checkpoint_from_model(&source, 60, 2);
    let mut target = tiny_model(21, Some("shared-en"));
    transfer_parameters(&ckpt, &mut target, TransferScope::EncoderDecoder).unwrap();
    assert_eq!(params_of(&target), params_of(&source));
}

#[test]
fn decoder_transfer_across_vocabularies_rejected() {
    let source = tiny_model(12, Some("en"));
    let ckpt = checkpoint_from_model(&source, 60, 2);
    let mut target = tiny_model(22, Some("fr"));
    assert!(matches!(
        transfer_parameters(&ckpt, &mut target, TransferScope::EncoderDecoder),
        Err(CheckpointError::FingerprintMismatch { .. })
    ));
    // Encoder-only transfer is still allowed.
    transfer_parameters(&ckpt, &mut target, TransferScope::Encoder).unwrap();
}

#[test]
fn shape_mismatch_names_tensor() {
    let source = tiny_model(13, Some("en"));
    let ckpt = checkpoint_from_model(&source, 0, 0);
    let mut target: Seq2SeqModel<f32> = Seq2SeqModel::init(
        Seq2SeqConfig {
            input_dim: 5,
            input_width: 8,
            conv_channels: 2,
            enc_layers: 1,
            enc_hidden: 5, // differs
            dec_layers: 1,
            dec_hidden: 6,
            attn_dim: 4,
            embed_dim: 3,
            vocab: 9,
        },
        Some("en".into()),
        1,
    );
    match transfer_parameters(&ckpt, &mut target, TransferScope::Encoder) {
        Err(CheckpointError::ShapeMismatch { name, .. }) => {
            assert!(name.starts_with("enc."));
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn f64_models_round_trip_too() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    let model: Seq2SeqModel<f64> = Seq2SeqModel::init(
        Seq2SeqConfig {
            input_dim: 3,
            input_width: 4,
            conv_channels: 1,
            enc_layers: 1,
            enc_hidden: 2,
            dec_layers: 1,
            dec_hidden: 3,
            attn_dim: 2,
            embed_dim: 2,
            vocab: 7,
        },
        None,
        2,
    );
    write_checkpoint(&path, &checkpoint_from_model(&model, 5, 5)).unwrap();
    let back = read_checkpoint(&path).unwrap();
    let mut fresh = model.clone();
    for (_, t) in fresh.named_params_mut() {
        for v in t.data_mut() {
            *v = 0.0;
        }
    }
    load_model_params(&mut fresh, &back).unwrap();
    for ((_, a), (_, b)) in model.named_params().iter().zip(fresh.named_params().iter()) {
        assert_eq!(a.data(), b.data());
    }
    let _ = Tensor::<f64>::zeros(vec![1]);
}
