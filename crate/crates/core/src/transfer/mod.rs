//! Checkpoint persistence, checkpoint averaging, and cross-task parameter
//! transfer.
//!
//! Container layout: magic "SSLST1"; length-prefixed UTF-8 JSON metadata
//! (architecture descriptor, optional vocabulary fingerprint, training step,
//! creation-order index); tensor count; then per-tensor records of
//! length-prefixed name, dtype tag, rank, extents, and a little-endian
//! IEEE-754 payload.

pub mod ops;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{DType, Scalar, Tensor};

pub use ops::{average_checkpoints, transfer_parameters, TransferScope};

const MAGIC: &[u8; 6] = b"SSLST1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad checkpoint magic")]
    Magic { path: String },
    #[error("{path}: truncated while reading {what}")]
    TruncatedAt { path: String, what: String },
    #[error("{path}: unknown dtype tag {tag} for tensor {tensor}")]
    UnknownDType {
        path: String,
        tag: u8,
        tensor: String,
    },
    #[error("{path}: malformed metadata: {msg}")]
    Metadata { path: String, msg: String },
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {name} has dtype {found:?}, expected {expected:?}")]
    DTypeMismatch {
        name: String,
        expected: DType,
        found: DType,
    },
    #[error("tensor {name} missing from checkpoint")]
    MissingTensor { name: String },
    #[error("unexpected tensor {name} in checkpoint")]
    UnexpectedTensor { name: String },
    #[error("checkpoints disagree on tensor names or shapes: {msg}")]
    Incompatible { msg: String },
    #[error("architecture descriptors differ across checkpoints")]
    ArchMismatch,
    #[error("vocabulary fingerprints differ (source {source_fp:?}, target {target_fp:?})")]
    FingerprintMismatch {
        source_fp: Option<String>,
        target_fp: Option<String>,
    },
    #[error("no checkpoint files given")]
    Empty,
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { expected: String, found: String },
}

/// Parameter-owning model that can be persisted and restored by name.
pub trait ParamModel<T: Scalar> {
    /// JSON architecture descriptor (kind + configuration).
    fn arch_json(&self) -> serde_json::Value;
    /// Present for any model with a vocabulary projection layer.
    fn vocab_fingerprint(&self) -> Option<String>;
    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: serde_json::Value,
    pub vocab_fingerprint: Option<String>,
    pub step: u64,
    /// Monotone creation index; "last k checkpoints" selects the k largest.
    pub order: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkptTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian payload, preserved bitwise across round trips.
    pub bytes: Vec<u8>,
}

impl CkptTensor {
    pub fn to_f64_values(&self) -> Vec<f64> {
        match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| {
                    f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                })
                .collect(),
        }
    }

    pub fn from_f64_values(name: &str, dtype: DType, shape: &[usize], values: &[f64]) -> CkptTensor {
        let mut bytes = Vec::with_capacity(values.len() * dtype.byte_len());
        match dtype {
            DType::F32 => {
                for &v in values {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in values {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        CkptTensor {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<CkptTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&CkptTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn arch_kind(&self) -> Option<&str> {
        self.meta.arch.get("kind").and_then(|v| v.as_str())
    }
}

/// Snapshots a model's parameters into an in-memory checkpoint.
pub fn checkpoint_from_model<T: Scalar>(
    model: &impl ParamModel<T>,
    step: u64,
    order: u64,
) -> Checkpoint {
    let tensors = model
        .named_params()
        .into_iter()
        .map(|(name, t)| {
            let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.byte_len());
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            CkptTensor {
                name,
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                bytes,
            }
        })
        .collect();
    Checkpoint {
        meta: CheckpointMeta {
            arch: model.arch_json(),
            vocab_fingerprint: model.vocab_fingerprint(),
            step,
            order,
        },
        tensors,
    }
}

/// Restores every parameter of `model` from the checkpoint. Names, shapes,
/// and dtypes must match exactly on both sides.
pub fn load_model_params<T: Scalar>(
    model: &mut impl ParamModel<T>,
    ckpt: &Checkpoint,
) -> Result<(), CheckpointError> {
    let mut pending: std::collections::BTreeMap<&str, &CkptTensor> =
        ckpt.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for (name, tensor) in model.named_params_mut() {
        let src = pending
            .remove(name.as_str())
            .ok_or(CheckpointError::MissingTensor { name: name.clone() })?;
        if src.dtype != T::DTYPE {
            return Err(CheckpointError::DTypeMismatch {
                name,
                expected: T::DTYPE,
                found: src.dtype,
            });
        }
        if src.shape != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: tensor.shape().to_vec(),
                found: src.shape.clone(),
            });
        }
        let width = T::DTYPE.byte_len();
        for (slot, chunk) in tensor.data_mut().iter_mut().zip(src.bytes.chunks_exact(width)) {
            *slot = T::read_le(chunk);
        }
    }
    if let Some((&name, _)) = pending.iter().next() {
        return Err(CheckpointError::UnexpectedTensor {
            name: name.to_string(),
        });
    }
    Ok(())
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let meta =
        serde_json::to_vec(&ckpt.meta).expect("checkpoint metadata always serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for t in &ckpt.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype.tag());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        out.extend_from_slice(&t.bytes);
    }
    fs::write(path, out).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let p = || path.display().to_string();
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: p(),
        source: e,
    })?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize, what: &str| -> Result<usize, CheckpointError> {
        if *at + n > bytes.len() {
            return Err(CheckpointError::TruncatedAt {
                path: p(),
                what: what.to_string(),
            });
        }
        let off = *at;
        *at += n;
        Ok(off)
    };
    let off = take(&mut at, 6, "magic")?;
    if &bytes[off..off + 6] != MAGIC {
        return Err(CheckpointError::Magic { path: p() });
    }
    let off = take(&mut at, 4, "metadata length")?;
    let meta_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let off = take(&mut at, meta_len, "metadata")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes[off..off + meta_len]).map_err(|e| {
            CheckpointError::Metadata {
                path: p(),
                msg: e.to_string(),
            }
        })?;
    let off = take(&mut at, 4, "tensor count")?;
    let count = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let off = take(&mut at, 4, &format!("tensor {i} name length"))?;
        let name_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let off = take(&mut at, name_len, &format!("tensor {i} name"))?;
        let name = String::from_utf8(bytes[off..off + name_len].to_vec()).map_err(|_| {
            CheckpointError::Metadata {
                path: p(),
                msg: format!("tensor {i} name is not UTF-8"),
            }
        })?;
        let off = take(&mut at, 1, &format!("tensor {name} dtype"))?;
        let dtype = DType::from_tag(bytes[off]).ok_or(CheckpointError::UnknownDType {
            path: p(),
            tag: bytes[off],
            tensor: name.clone(),
        })?;
        let off = take(&mut at, 4, &format!("tensor {name} rank"))?;
        let rank = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let off = take(&mut at, 4, &format!("tensor {name} extents"))?;
            shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = numel * dtype.byte_len();
        let off = take(&mut at, payload, &format!("tensor {name} payload"))?;
        tensors.push(CkptTensor {
            name,
            dtype,
            shape,
            bytes: bytes[off..off + payload].to_vec(),
        });
    }
    Ok(Checkpoint { meta, tensors })
}

/// Plain-text dump of the metadata and tensor table, for debugging.
pub fn describe_checkpoint(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "arch: {}\nstep: {}\norder: {}\nvocab_fingerprint: {}\ntensors: {}\n",
        ckpt.meta.arch,
        ckpt.meta.step,
        ckpt.meta.order,
        ckpt.meta
            .vocab_fingerprint
            .as_deref()
            .unwrap_or("(none)"),
        ckpt.tensors.len()
    ));
    for t in &ckpt.tensors {
        out.push_str(&format!(
            "  {} {:?} {:?} ({} bytes)\n",
            t.name,
            t.dtype,
            t.shape,
            t.bytes.len()
        ));
    }
    out
}
