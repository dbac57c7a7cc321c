//! RIFF/WAVE PCM16 mono 16 kHz reader and writer.

use std::fs;
use std::path::Path;

use super::{AudioError, Waveform, SAMPLE_RATE};

fn io_err(path: &Path, source: std::io::Error) -> AudioError {
    AudioError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Loads a 16-bit PCM mono 16 kHz WAV file; samples are scaled to [-1, 1]
/// by dividing by 32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    let p = || path.display().to_string();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 {
        return Err(AudioError::Truncated { path: p() });
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(AudioError::NotRiff { path: p() });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWave { path: p() });
    }

    let mut at = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = u32_at(&bytes, at + 4) as usize;
        let body_at = at + 8;
        if body_at + size > bytes.len() {
            return Err(AudioError::Truncated { path: p() });
        }
        let body = &bytes[body_at..body_at + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Truncated { path: p() });
                }
                fmt = Some((
                    u16_at(body, 0),
                    u16_at(body, 2),
                    u32_at(body, 4),
                    u16_at(body, 14),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        at = body_at + size + (size & 1);
    }

    let (tag, channels, rate, bits) = fmt.ok_or(AudioError::Truncated { path: p() })?;
    if tag != 1 {
        return Err(AudioError::UnsupportedEncoding { path: p(), tag });
    }
    if channels != 1 {
        return Err(AudioError::ChannelCount {
            path: p(),
            channels,
        });
    }
    if rate != SAMPLE_RATE {
        return Err(AudioError::SampleRate { path: p(), rate });
    }
    if bits != 16 {
        return Err(AudioError::BitDepth { path: p(), bits });
    }
    let data = data.ok_or(AudioError::Truncated { path: p() })?;
    if data.len() % 2 != 0 {
        return Err(AudioError::Truncated { path: p() });
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples)
}

/// Writes a waveform as 16-bit PCM mono 16 kHz. Amplitudes are scaled by
/// 32768, rounded, and clamped to the i16 range.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<(), AudioError> {
    let path = path.as_ref();
    let n = w.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in w.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes(channels: u16, rate: u32, bits: u16, pcm: &[i16]) -> Vec<u8> {
        let data_len = (pcm.len() * 2) as u32;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_len.to_le_bytes());
        for &v in pcm {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn all_zero_pcm_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        std::fs::write(&path, wav_bytes(1, 16000, 16, &vec![0i16; 16000])).unwrap();
        let w = load_wav(&path).unwrap();
        assert_eq!(w.len(), 16000);
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_rejected_with_channel_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        std::fs::write(&path, wav_bytes(2, 16000, 16, &[0, 0, 0, 0])).unwrap();
        assert!(matches!(
            load_wav(&path),
            Err(AudioError::ChannelCount { channels: 2, .. })
        ));
    }

    #[test]
    fn rate_and_depth_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("r.wav");
        std::fs::write(&p1, wav_bytes(1, 44100, 16, &[0, 0])).unwrap();
        assert!(matches!(
            load_wav(&p1),
            Err(AudioError::SampleRate { rate: 44100, .. })
        ));
        let p2 = dir.path().join("b.wav");
        std::fs::write(&p2, wav_bytes(1, 16000, 8, &[0, 0])).unwrap();
        assert!(matches!(load_wav(&p2), Err(AudioError::BitDepth { bits: 8, .. })));
    }

    #[test]
    fn extreme_pcm_scales_to_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wav");
        std::fs::write(&path, wav_bytes(1, 16000, 16, &[-32768, 32767])).unwrap();
        let w = load_wav(&path).unwrap();
        assert_eq!(w.samples()[0], -1.0);
        assert!((w.samples()[1] - 32767.0 / 32768.0).abs() < 1e-12);
    }

    #[test]
    fn write_then_load_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let samples: Vec<f64> = (0..1000)
            .map(|i| 0.5 * (i as f64 * 0.01).sin())
            .collect();
        let w = Waveform::new(samples.clone()).unwrap();
        write_wav(&path, &w).unwrap();
        let back = load_wav(&path).unwrap();
        for (a, b) in samples.iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }
}
