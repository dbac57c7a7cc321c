//! Waveform ingestion, log-mel filterbank extraction, SpecAugment, and the
//! binary feature cache format.

pub mod augment;
pub mod cache;
pub mod mel;
pub mod wav;

use thiserror::Error;

pub use augment::{specaugment, AugmentPolicy};
pub use cache::{read_feature_cache, write_feature_cache};
pub use mel::logmel;
pub use wav::{load_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a RIFF file")]
    NotRiff { path: String },
    #[error("{path}: not a WAVE file")]
    NotWave { path: String },
    #[error("{path}: unsupported encoding (format tag {tag}, 16-bit PCM required)")]
    UnsupportedEncoding { path: String, tag: u16 },
    #[error("{path}: expected mono audio, found {channels} channels")]
    ChannelCount { path: String, channels: u16 },
    #[error("{path}: expected 16000 Hz sample rate, found {rate}")]
    SampleRate { path: String, rate: u32 },
    #[error("{path}: expected 16 bits per sample, found {bits}")]
    BitDepth { path: String, bits: u16 },
    #[error("{path}: truncated or malformed chunk layout")]
    Truncated { path: String },
    #[error("waveform is empty")]
    EmptyWaveform,
    #[error("waveform of {samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("{path}: bad feature cache magic")]
    CacheMagic { path: String },
    #[error("{path}: feature cache truncated")]
    CacheTruncated { path: String },
}

/// Mono 16 kHz waveform with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Waveform, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::EmptyWaveform);
        }
        Ok(Waveform { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// Provenance of a feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    LogMel,
    CpcContext,
    VqEmbedding,
    MlmContext,
}

/// Time x dim feature matrix with a fixed hop.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f64>,
    dim: usize,
    pub hop_ms: f64,
    pub kind: FeatureKind,
}

impl FeatureSequence {
    pub fn new(data: Vec<f64>, dim: usize, hop_ms: f64, kind: FeatureKind) -> FeatureSequence {
        assert!(dim > 0 && !data.is_empty() && data.len() % dim == 0);
        FeatureSequence {
            data,
            dim,
            hop_ms,
            kind,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Utterance-level per-dimension mean/variance normalization, the usual
    /// front-end step before feeding features to a network.
    pub fn normalized(&self) -> FeatureSequence {
        let t = self.num_frames();
        let d = self.dim;
        let mut mean = vec![0.0f64; d];
        for frame in self.data.chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(frame) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= t as f64;
        }
        let mut var = vec![0.0f64; d];
        for frame in self.data.chunks_exact(d) {
            for (s, (&v, &m)) in var.iter_mut().zip(frame.iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|&s| (s / t as f64).sqrt().max(1e-8))
            .collect();
        let data = self
            .data
            .chunks_exact(d)
            .flat_map(|frame| {
                frame
                    .iter()
                    .zip(mean.iter().zip(&std))
                    .map(|(&v, (&m, &s))| (v - m) / s)
                    .collect::<Vec<_>>()
            })
            .collect();
        FeatureSequence {
            data,
            dim: d,
            hop_ms: self.hop_ms,
            kind: self.kind,
        }
    }
}
