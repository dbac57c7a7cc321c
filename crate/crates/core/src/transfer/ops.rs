//! Checkpoint averaging and scoped parameter transfer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_checkpoint, Checkpoint, CheckpointError, CkptTensor, ParamModel};
use crate::numerics::Scalar;

/// Which parameter namespaces an ASR -> ST transfer copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferScope {
    Encoder,
    EncoderDecoder,
}

impl TransferScope {
    /// Tensor-name prefixes covered by this scope.
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            TransferScope::Encoder => &["enc."],
            TransferScope::EncoderDecoder => &["enc.", "dec.", "proj."],
        }
    }

    pub fn covers(self, name: &str) -> bool {
        self.prefixes().iter().any(|p| name.starts_with(p))
    }
}

/// Averages the `k` most recent checkpoints (greatest creation-order index).
/// All files must agree on tensor names, shapes, dtypes, and architecture.
pub fn average_checkpoints(
    files: &[impl AsRef<Path>],
    k: usize,
) -> Result<Checkpoint, CheckpointError> {
    if files.is_empty() || k == 0 {
        return Err(CheckpointError::Empty);
    }
    let mut all: Vec<Checkpoint> = files
        .iter()
        .map(read_checkpoint)
        .collect::<Result<_, _>>()?;
    all.sort_by(|a, b| b.meta.order.cmp(&a.meta.order));
    all.truncate(k);

    let first = &all[0];
    for other in &all[1..] {
        if other.meta.arch != first.meta.arch {
            return Err(CheckpointError::ArchMismatch);
        }
        if other.tensors.len() != first.tensors.len() {
            return Err(CheckpointError::Incompatible {
                msg: format!(
                    "{} vs {} tensors",
                    other.tensors.len(),
                    first.tensors.len()
                ),
            });
        }
        for (a, b) in first.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape || a.dtype != b.dtype {
                return Err(CheckpointError::Incompatible {
                    msg: format!("tensor {} vs {}", a.name, b.name),
                });
            }
        }
    }

    let n = all.len() as f64;
    let tensors = first
        .tensors
        .iter()
        .enumerate()
        .map(|(i, proto)| {
            let mut acc = vec![0.0f64; proto.to_f64_values().len()];
            for ckpt in &all {
                for (a, v) in acc.iter_mut().zip(ckpt.tensors[i].to_f64_values()) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= n;
            }
            CkptTensor::from_f64_values(&proto.name, proto.dtype, &proto.shape, &acc)
        })
        .collect();
    let mut meta = first.meta.clone();
    meta.step = all.iter().map(|c| c.meta.step).max().unwrap();
    meta.order = all.iter().map(|c| c.meta.order).max().unwrap();
    Ok(Checkpoint {
        meta,
        tensors,
    })
}

/// Copies the source tensors under the scope's namespaces into the target
/// model bitwise; everything outside the scope is untouched. Decoder scope
/// additionally requires matching vocabulary fingerprints.
pub fn transfer_parameters<T: Scalar>(
    source: &Checkpoint,
    target: &mut impl ParamModel<T>,
    scope: TransferScope,
) -> Result<(), CheckpointError> {
    if scope == TransferScope::EncoderDecoder {
        let src_fp = source.meta.vocab_fingerprint.clone();
        let tgt_fp = target.vocab_fingerprint();
        if src_fp.is_none() || src_fp != tgt_fp {
            return Err(CheckpointError::FingerprintMismatch {
                source_fp: src_fp,
                target_fp: tgt_fp,
            });
        }
    }
    for (name, tensor) in target.named_params_mut() {
        if !scope.covers(&name) {
            continue;
        }
        let src = source
            .tensor(&name)
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
        for (slot, chunk) in tensor
            .data_mut()
            .iter_mut()
            .zip(src.bytes.chunks_exact(width))
        {
            *slot = T::read_le(chunk);
        }
    }
    Ok(())
}
