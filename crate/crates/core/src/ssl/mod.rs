//! Self-supervised representation learners: contrastive future prediction
//! over raw audio, k-means vector quantization of the latents, and masked
//! prediction over the discrete codes.

pub mod cpc;
pub mod extract;
pub mod mlm;
pub mod vq;

use thiserror::Error;

pub use cpc::{CpcConfig, CpcModel};
pub use extract::{extract_features, finetune_cpc, finetune_mlm, SslModels};
pub use mlm::{mask_batch, MaskedLmModel, MlmConfig};
pub use vq::{kmeans_train, quantize, Codebook};

use crate::numerics::TapeError;

#[derive(Debug, Error)]
pub enum SslError {
    #[error("sequence of {frames} frames is too short (need more than {min})")]
    SequenceTooShort { frames: usize, min: usize },
    #[error("waveform too short for one encoder frame")]
    WaveformTooShort,
    #[error("k-means needs at least {k} distinct vectors, found {distinct}")]
    TooFewDistinctVectors { k: usize, distinct: usize },
    #[error("latent dimension {dim} does not match codebook dimension {codebook_dim}")]
    DimensionMismatch { dim: usize, codebook_dim: usize },
    #[error("no masked positions in batch; re-draw the mask")]
    NoMaskedPositions,
    #[error("sequence length {len} exceeds the model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("feature extraction kind {kind} requires a {missing} model")]
    MissingModel {
        kind: &'static str,
        missing: &'static str,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Optim(#[from] crate::numerics::OptimError),
}
