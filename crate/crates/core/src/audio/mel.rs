//! Log-mel filterbank extraction.
//!
//! Pipeline: 400-sample (25 ms) periodic Hann window, hop 160 (10 ms),
//! 512-point FFT power spectrum, 80 triangular HTK-mel filters over
//! 0..8000 Hz, natural log with a 1e-10 floor.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::{AudioError, FeatureKind, FeatureSequence, Waveform};

pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filter weights over the 257 one-sided FFT bins.
fn mel_filters(n_mels: usize) -> Vec<Vec<(usize, f64)>> {
    let bins = FFT_SIZE / 2 + 1;
    let hz_per_bin = 16_000.0 / FFT_SIZE as f64;
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(8_000.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut filters = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (f_lo, f_c, f_hi) = (points[m], points[m + 1], points[m + 2]);
        let mut weights = Vec::new();
        for k in 0..bins {
            let f = k as f64 * hz_per_bin;
            let w = if f <= f_lo || f >= f_hi {
                0.0
            } else if f <= f_c {
                (f - f_lo) / (f_c - f_lo)
            } else {
                (f_hi - f) / (f_hi - f_c)
            };
            if w > 0.0 {
                weights.push((k, w));
            }
        }
        filters.push(weights);
    }
    filters
}

struct MelContext {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
}

impl MelContext {
    fn new(n_mels: usize) -> MelContext {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(FFT_SIZE);
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        MelContext {
            fft,
            window,
            filters: mel_filters(n_mels),
        }
    }
}

/// Extracts an 80-dimensional log-mel feature matrix with a 10 ms hop.
///
/// The frame count is floor((samples - 400) / 160) + 1; inputs shorter than
/// one window are rejected.
pub fn logmel(w: &Waveform) -> Result<FeatureSequence, AudioError> {
    logmel_dims(w, N_MELS)
}

pub fn logmel_dims(w: &Waveform, n_mels: usize) -> Result<FeatureSequence, AudioError> {
    let samples = w.samples();
    if samples.len() < WINDOW {
        return Err(AudioError::TooShort {
            samples: samples.len(),
            window: WINDOW,
        });
    }
    let ctx = MelContext::new(n_mels);
    let frames = (samples.len() - WINDOW) / HOP + 1;
    let mut out = Vec::with_capacity(frames * n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut power = vec![0.0f64; FFT_SIZE / 2 + 1];
    for t in 0..frames {
        let seg = &samples[t * HOP..t * HOP + WINDOW];
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < WINDOW {
                Complex::new(seg[i] * ctx.window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        ctx.fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].re * buf[k].re + buf[k].im * buf[k].im;
        }
        for filter in &ctx.filters {
            let mut e = 0.0;
            for &(k, w) in filter {
                e += w * power[k];
            }
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(FeatureSequence::new(out, n_mels, 10.0, FeatureKind::LogMel))
}

/// Frame count the extractor will produce for a given sample count.
pub fn frame_count(samples: usize) -> usize {
    if samples < WINDOW {
        0
    } else {
        (samples - WINDOW) / HOP + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_gives_98_by_80() {
        let w = Waveform::new(vec![0.01; 16_000]).unwrap();
        let f = logmel(&w).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 80);
    }

    #[test]
    fn all_zero_waveform_hits_the_log_floor() {
        let w = Waveform::new(vec![0.0; 4000]).unwrap();
        let f = logmel(&w).unwrap();
        let expect = LOG_FLOOR.ln();
        assert!(f.data().iter().all(|&v| v == expect));
    }

    #[test]
    fn shorter_than_window_rejected() {
        let w = Waveform::new(vec![0.1; 399]).unwrap();
        assert!(matches!(logmel(&w), Err(AudioError::TooShort { .. })));
    }

    #[test]
    fn delay_by_one_hop_shifts_frames() {
        let tone: Vec<f64> = (0..4000)
            .map(|n| 0.4 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16000.0).sin())
            .collect();
        let mut delayed = vec![0.0; 160];
        delayed.extend_from_slice(&tone);
        let a = logmel(&Waveform::new(tone).unwrap()).unwrap();
        let b = logmel(&Waveform::new(delayed).unwrap()).unwrap();
        // Frame t of the original appears at frame t+1 of the delayed signal.
        for t in 0..a.num_frames() {
            for d in 0..80 {
                let x = a.frame(t)[d];
                let y = b.frame(t + 1)[d];
                assert!(
                    (x - y).abs() < 1e-9,
                    "frame {t} dim {d}: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn scaling_adds_two_log_c() {
        let tone: Vec<f64> = (0..2000)
            .map(|n| 0.3 * (2.0 * std::f64::consts::PI * 700.0 * n as f64 / 16000.0).sin())
            .collect();
        let scaled: Vec<f64> = tone.iter().map(|&v| v * 2.0).collect();
        let a = logmel(&Waveform::new(tone).unwrap()).unwrap();
        let b = logmel(&Waveform::new(scaled).unwrap()).unwrap();
        let shift = 2.0 * 2.0f64.ln();
        let floor = LOG_FLOOR.ln();
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x > floor + 1e-12 && *y > floor + 1e-12 {
                assert!((y - x - shift).abs() < 1e-9);
            }
        }
    }
}
