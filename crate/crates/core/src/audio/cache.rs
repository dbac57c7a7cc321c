//! Binary feature cache: magic "SSLF1", then D and T as u32 little-endian,
//! then T*D feature values as f32 little-endian.

use std::fs;
use std::path::Path;

use super::{AudioError, FeatureKind, FeatureSequence};

const MAGIC: &[u8; 5] = b"SSLF1";

pub fn write_feature_cache(path: impl AsRef<Path>, f: &FeatureSequence) -> Result<(), AudioError> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(13 + f.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(f.num_frames() as u32).to_le_bytes());
    for &v in f.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| AudioError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_feature_cache(
    path: impl AsRef<Path>,
    kind: FeatureKind,
    hop_ms: f64,
) -> Result<FeatureSequence, AudioError> {
    let path = path.as_ref();
    let p = || path.display().to_string();
    let bytes = fs::read(path).map_err(|e| AudioError::Io {
        path: p(),
        source: e,
    })?;
    if bytes.len() < 13 || &bytes[0..5] != MAGIC {
        return Err(AudioError::CacheMagic { path: p() });
    }
    let d = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let t = u32::from_le_bytes([bytes[9], bytes[10], bytes[11], bytes[12]]) as usize;
    let need = 13 + 4 * d * t;
    if bytes.len() < need {
        return Err(AudioError::CacheTruncated { path: p() });
    }
    let data: Vec<f64> = bytes[13..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(FeatureSequence::new(data, d, hop_ms, kind))
}
