//! Desk-scale toolkit for self-supervised speech representation learning and
//! attention-based speech-to-text translation.
//!
//! The crate is organized around the pipeline stages: [`numerics`] provides a
//! reverse-mode differentiable core; [`audio`] ingests WAV audio and extracts
//! log-mel features with SpecAugment; [`ssl`] hosts the contrastive,
//! vector-quantized, and masked-prediction representation learners;
//! [`seq2seq`] is the attention encoder-decoder used for ASR and ST;
//! [`transfer`] persists checkpoints and moves parameters between tasks;
//! [`decode`] performs beam-search inference and scoring; [`text`] and
//! [`corpus`] handle text processing and corpus generation.

pub mod audio;
pub mod corpus;
pub mod decode;
pub mod numerics;
pub mod seq2seq;
pub mod ssl;
pub mod text;
pub mod transfer;
