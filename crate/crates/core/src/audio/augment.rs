//! SpecAugment with time and frequency masking (no time warping).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FeatureSequence;

/// Masking policy. The frequency-mask width scales with the feature
/// dimension: at dimension D the maximum width is round(27 * D / 80).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub time_masks: usize,
    pub time_max_width: usize,
    pub freq_masks: usize,
    pub freq_max_width_at_80: usize,
}

impl Default for AugmentPolicy {
    fn default() -> AugmentPolicy {
        AugmentPolicy {
            time_masks: 2,
            time_max_width: 100,
            freq_masks: 2,
            freq_max_width_at_80: 27,
        }
    }
}

impl AugmentPolicy {
    /// Identity policy: no masks of either kind.
    pub fn none() -> AugmentPolicy {
        AugmentPolicy {
            time_masks: 0,
            time_max_width: 0,
            freq_masks: 0,
            freq_max_width_at_80: 0,
        }
    }

    pub fn scaled_freq_width(&self, dim: usize) -> usize {
        (self.freq_max_width_at_80 as f64 * dim as f64 / 80.0).round() as usize
    }
}

/// Applies up to `time_masks` time masks and `freq_masks` frequency masks,
/// zeroing the masked cells. Draw order per call: all time-mask widths, all
/// time-mask starts, all frequency-mask widths, all frequency-mask starts;
/// widths are uniform over 0..=max_width and starts uniform over
/// 0..=extent-width.
pub fn specaugment<R: Rng>(
    f: &FeatureSequence,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> FeatureSequence {
    let t = f.num_frames();
    let d = f.dim();
    let t_cap = policy.time_max_width.min(t);
    let f_cap = policy.scaled_freq_width(d).min(d);

    let time_widths: Vec<usize> = (0..policy.time_masks)
        .map(|_| rng.gen_range(0..=t_cap))
        .collect();
    let time_starts: Vec<usize> = time_widths
        .iter()
        .map(|&w| rng.gen_range(0..=t - w))
        .collect();
    let freq_widths: Vec<usize> = (0..policy.freq_masks)
        .map(|_| rng.gen_range(0..=f_cap))
        .collect();
    let freq_starts: Vec<usize> = freq_widths
        .iter()
        .map(|&w| rng.gen_range(0..=d - w))
        .collect();

    let mut out = f.clone();
    let data = out.data_mut();
    for (&w, &s) in time_widths.iter().zip(&time_starts) {
        for row in s..s + w {
            for v in data[row * d..(row + 1) * d].iter_mut() {
                *v = 0.0;
            }
        }
    }
    for (&w, &s) in freq_widths.iter().zip(&freq_starts) {
        for row in 0..t {
            for v in data[row * d + s..row * d + s + w].iter_mut() {
                *v = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FeatureKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn features(t: usize, d: usize) -> FeatureSequence {
        let data = (0..t * d).map(|i| 1.0 + (i % 13) as f64).collect();
        FeatureSequence::new(data, d, 10.0, FeatureKind::LogMel)
    }

    #[test]
    fn zero_mask_policy_is_identity() {
        let f = features(20, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = specaugment(&f, &AugmentPolicy::none(), &mut rng);
        assert_eq!(out, f);
    }

    #[test]
    fn freq_width_scales_with_dim() {
        let p = AugmentPolicy::default();
        assert_eq!(p.scaled_freq_width(80), 27);
        assert_eq!(p.scaled_freq_width(512), 173);
    }

    #[test]
    fn seed_42_matches_reference_sampler() {
        let f = features(50, 80);
        let p = AugmentPolicy::default();
        let out = specaugment(&f, &p, &mut ChaCha8Rng::seed_from_u64(42));

        // Independent transcript of the documented draw order.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t_cap = 50usize;
        let f_cap = 27usize;
        let tw: Vec<usize> = (0..2).map(|_| rng.gen_range(0..=t_cap)).collect();
        let ts: Vec<usize> = tw.iter().map(|&w| rng.gen_range(0..=50 - w)).collect();
        let fw: Vec<usize> = (0..2).map(|_| rng.gen_range(0..=f_cap)).collect();
        let fs: Vec<usize> = fw.iter().map(|&w| rng.gen_range(0..=80 - w)).collect();

        let mut expect = f.clone();
        let data = expect.data_mut();
        for (&w, &s) in tw.iter().zip(&ts) {
            for row in s..s + w {
                for v in data[row * 80..(row + 1) * 80].iter_mut() {
                    *v = 0.0;
                }
            }
        }
        for (&w, &s) in fw.iter().zip(&fs) {
            for row in 0..50 {
                for v in data[row * 80 + s..row * 80 + s + w].iter_mut() {
                    *v = 0.0;
                }
            }
        }
        assert_eq!(out, expect);
    }

    #[test]
    fn untouched_cells_are_bitwise_unchanged() {
        let f = features(30, 40);
        let p = AugmentPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = specaugment(&f, &p, &mut rng);
        let mut changed_rows = 0usize;
        for t in 0..30 {
            let masked_row = out.frame(t).iter().all(|&v| v == 0.0);
            if masked_row {
                changed_rows += 1;
                continue;
            }
            for d in 0..40 {
                let v = out.frame(t)[d];
                assert!(v == 0.0 || v == f.frame(t)[d]);
            }
        }
        assert!(changed_rows <= p.time_masks * p.time_max_width);
    }

    #[test]
    fn deterministic_per_seed() {
        let f = features(25, 32);
        let p = AugmentPolicy::default();
        let a = specaugment(&f, &p, &mut ChaCha8Rng::seed_from_u64(5));
        let b = specaugment(&f, &p, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
