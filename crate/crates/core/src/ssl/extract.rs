//! Frozen-feature extraction for every representation kind, plus
//! unsupervised fine-tuning of pretrained models on new audio.

use super::cpc::pretrain_cpc;
use super::mlm::pretrain_mlm;
use super::{Codebook, CpcModel, MaskedLmModel, SslError};
use crate::audio::{logmel, FeatureKind, FeatureSequence, Waveform};
use crate::numerics::{Scalar, Schedule, Tape};
use crate::ssl::vq::quantize;

/// The pretrained models a feature kind may require.
#[derive(Clone, Copy, Default)]
pub struct SslModels<'a, T> {
    pub cpc: Option<&'a CpcModel<T>>,
    pub codebook: Option<&'a Codebook<T>>,
    pub mlm: Option<&'a MaskedLmModel<T>>,
}

/// Extracts features of the requested kind from one waveform. Models are
/// treated as frozen; extraction is pure.
///
/// - `fbank`: log-mel filterbank.
/// - `cpc`: aggregator context vectors.
/// - `vq`: quantized latents (codebook embeddings) fed through the aggregator.
/// - `mlm`: final-block hidden states over the code sequence, no masking.
pub fn extract_features<T: Scalar>(
    kind: FeatureKind,
    models: &SslModels<'_, T>,
    w: &Waveform,
) -> Result<FeatureSequence, SslError> {
    match kind {
        FeatureKind::LogMel => logmel(w).map_err(SslError::from),
        FeatureKind::CpcContext => {
            let cpc = models.cpc.ok_or(SslError::MissingModel {
                kind: "cpc",
                missing: "cpc",
            })?;
            let (_, c) = cpc.forward(w)?;
            Ok(FeatureSequence::new(
                c.data().iter().map(|v| v.to_f64()).collect(),
                c.shape()[1],
                10.0,
                FeatureKind::CpcContext,
            ))
        }
        FeatureKind::VqEmbedding => {
            let cpc = models.cpc.ok_or(SslError::MissingModel {
                kind: "vq",
                missing: "cpc",
            })?;
            let cb = models.codebook.ok_or(SslError::MissingModel {
                kind: "vq",
                missing: "codebook",
            })?;
            let contexts = vq_contexts(cpc, cb, w)?;
            Ok(FeatureSequence::new(
                contexts.0,
                contexts.1,
                10.0,
                FeatureKind::VqEmbedding,
            ))
        }
        FeatureKind::MlmContext => {
            let cpc = models.cpc.ok_or(SslError::MissingModel {
                kind: "mlm",
                missing: "cpc",
            })?;
            let cb = models.codebook.ok_or(SslError::MissingModel {
                kind: "mlm",
                missing: "codebook",
            })?;
            let mlm = models.mlm.ok_or(SslError::MissingModel {
                kind: "mlm",
                missing: "mlm",
            })?;
            let codes = code_sequence(cpc, cb, w)?;
            let hidden = mlm.hidden(&codes)?;
            Ok(FeatureSequence::new(
                hidden.data().iter().map(|v| v.to_f64()).collect(),
                hidden.shape()[1],
                10.0,
                FeatureKind::MlmContext,
            ))
        }
    }
}

/// Discrete code sequence of a waveform under a CPC encoder + codebook.
pub fn code_sequence<T: Scalar>(
    cpc: &CpcModel<T>,
    cb: &Codebook<T>,
    w: &Waveform,
) -> Result<Vec<usize>, SslError> {
    let (z, _) = cpc.forward(w)?;
    let (tokens, _) = quantize(&z, cb)?;
    Ok(tokens)
}

/// Quantized-embedding contexts: z -> nearest centroids -> aggregator.
fn vq_contexts<T: Scalar>(
    cpc: &CpcModel<T>,
    cb: &Codebook<T>,
    w: &Waveform,
) -> Result<(Vec<f64>, usize), SslError> {
    let mut tape = Tape::new();
    let binding = cpc.bind(&mut tape);
    let (z, _) = cpc.forward_on_tape(&mut tape, &binding, w)?;
    let cb_node = tape.input(cb.centroids().clone());
    if cb.dim() != tape.value(z).shape()[1] {
        return Err(SslError::DimensionMismatch {
            dim: tape.value(z).shape()[1],
            codebook_dim: cb.dim(),
        });
    }
    let zq = tape.quantize(z, cb_node)?;
    let contexts = cpc.aggregate_on_tape(&mut tape, &binding, zq)?;
    let c = tape.value(contexts);
    Ok((c.data().iter().map(|v| v.to_f64()).collect(), c.shape()[1]))
}

/// Continues contrastive pretraining on a new unlabeled corpus; the input
/// model is untouched and a fine-tuned copy is returned.
pub fn finetune_cpc<T: Scalar>(
    model: &CpcModel<T>,
    corpus: &[Waveform],
    steps: usize,
    batch_size: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<CpcModel<T>, SslError> {
    if corpus.is_empty() {
        return Err(SslError::EmptyCorpus);
    }
    let mut tuned = model.clone();
    pretrain_cpc(&mut tuned, corpus, steps, batch_size, schedule, seed, None)?;
    Ok(tuned)
}

/// Continues masked-prediction training on re-quantized codes of a new
/// corpus; the input model is untouched and a fine-tuned copy is returned.
pub fn finetune_mlm<T: Scalar>(
    mlm: &MaskedLmModel<T>,
    cpc: &CpcModel<T>,
    cb: &Codebook<T>,
    corpus: &[Waveform],
    steps: usize,
    batch_size: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<MaskedLmModel<T>, SslError> {
    if corpus.is_empty() {
        return Err(SslError::EmptyCorpus);
    }
    let codes: Vec<Vec<usize>> = corpus
        .iter()
        .map(|w| code_sequence(cpc, cb, w))
        .collect::<Result<_, _>>()?;
    let mut tuned = mlm.clone();
    pretrain_mlm(&mut tuned, &codes, steps, batch_size, schedule, seed, None)?;
    Ok(tuned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::cpc::CpcConfig;
    use crate::ssl::mlm::MlmConfig;
    use crate::ssl::vq::kmeans_train;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cpc() -> CpcModel<f64> {
        CpcModel::init(
            CpcConfig {
                channels: 8,
                steps: 3,
                negatives: 2,
                ..CpcConfig::default()
            },
            1,
        )
    }

    fn tone(samples: usize, hz: f64) -> Waveform {
        Waveform::new(
            (0..samples)
                .map(|n| 0.5 * (2.0 * std::f64::consts::PI * hz * n as f64 / 16000.0).sin())
                .collect(),
        )
        .unwrap()
    }

    fn toy_codebook(cpc: &CpcModel<f64>, w: &Waveform, k: usize) -> Codebook<f64> {
        let (z, _) = cpc.forward(w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        kmeans_train(&z, k, 10, &mut rng).unwrap().codebook
    }

    #[test]
    fn fbank_kind_gives_98_by_80_for_one_second() {
        let models: SslModels<'_, f64> = SslModels::default();
        let f = extract_features(FeatureKind::LogMel, &models, &tone(16_000, 440.0)).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 80);
    }

    #[test]
    fn cpc_kind_gives_100_frames_for_one_second() {
        let cpc = small_cpc();
        let models = SslModels {
            cpc: Some(&cpc),
            ..SslModels::default()
        };
        let f = extract_features(FeatureKind::CpcContext, &models, &tone(16_000, 440.0)).unwrap();
        assert_eq!(f.num_frames(), 100);
        assert_eq!(f.dim(), 8);
        assert_eq!(f.kind, FeatureKind::CpcContext);
    }

    #[test]
    fn repeated_extraction_is_bitwise_identical() {
        let cpc = small_cpc();
        let w = tone(4800, 600.0);
        let cb = toy_codebook(&cpc, &w, 4);
        let mlm: MaskedLmModel<f64> = MaskedLmModel::init(
            MlmConfig {
                vocab: 4,
                width: 8,
                blocks: 1,
                heads: 2,
                ..MlmConfig::default()
            },
            3,
        );
        let models = SslModels {
            cpc: Some(&cpc),
            codebook: Some(&cb),
            mlm: Some(&mlm),
        };
        for kind in [
            FeatureKind::LogMel,
            FeatureKind::CpcContext,
            FeatureKind::VqEmbedding,
            FeatureKind::MlmContext,
        ] {
            let a = extract_features(kind, &models, &w).unwrap();
            let b = extract_features(kind, &models, &w).unwrap();
            assert_eq!(a, b, "{kind:?} extraction not deterministic");
        }
    }

    #[test]
    fn missing_model_is_rejected() {
        let models: SslModels<'_, f64> = SslModels::default();
        let err = extract_features(FeatureKind::CpcContext, &models, &tone(3200, 440.0));
        assert!(matches!(err, Err(SslError::MissingModel { .. })));
    }

    #[test]
    fn zero_step_finetune_returns_identical_model() {
        let cpc = small_cpc();
        let corpus = vec![tone(4800, 500.0), tone(4800, 700.0)];
        let tuned = finetune_cpc(&cpc, &corpus, 0, 2, &Schedule::fixed(1e-3), 5).unwrap();
        let a: Vec<_> = crate::transfer::ParamModel::named_params(&cpc);
        let b: Vec<_> = crate::transfer::ParamModel::named_params(&tuned);
        for ((n1, t1), (n2, t2)) in a.iter().zip(&b) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }
}
