use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadConfig {
    pub threshold_offset: f64,
    pub context: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            threshold_offset: 0.0,
            context: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask {
    pub keep: Vec<bool>,
}

impl FrameMask {
    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }
}

/// Energy VAD on C0: a frame is voiced if C0 exceeds the utterance mean plus
/// `threshold_offset`; the raw decisions are then smoothed by a strict majority
/// vote over the window of ±`context` frames (clipped at the edges).
pub fn energy_vad(f: &FeatureMatrix, threshold_offset: f64, context: usize) -> FrameMask {
    let frames = f.num_frames();
    if frames == 0 || f.num_coeffs() == 0 {
        return FrameMask { keep: Vec::new() };
    }
    let c0 = f.values.column(0);
    let threshold = c0.mean() + threshold_offset;
    let raw: Vec<bool> = c0.iter().map(|&e| e > threshold).collect();
    if context == 0 {
        return FrameMask { keep: raw };
    }
    // prefix[i] = number of voiced frames in raw[..i]
    let mut prefix = vec![0usize; frames + 1];
    for (i, &r) in raw.iter().enumerate() {
        prefix[i + 1] = prefix[i] + r as usize;
    }
    let keep = (0..frames)
        .map(|t| {
            let lo = t.saturating_sub(context);
            let hi = (t + context + 1).min(frames);
            let voiced = prefix[hi] - prefix[lo];
            2 * voiced > hi - lo
        })
        .collect();
    FrameMask { keep }
}

/// Removes the frames whose mask entry is false, preserving order.
pub fn apply_mask(f: &FeatureMatrix, m: &FrameMask) -> Result<FeatureMatrix> {
    if m.len() != f.num_frames() {
        return Err(Error::LengthMismatch {
            what: "frame mask".into(),
            expected: f.num_frames(),
            actual: m.len(),
        });
    }
    let rows: Vec<usize> = (0..m.len()).filter(|&i| m.keep[i]).collect();
    let values = DMatrix::from_fn(rows.len(), f.num_coeffs(), |r, c| f.values[(rows[r], c)]);
    Ok(FeatureMatrix {
        values,
        frame_shift_ms: f.frame_shift_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn from_c0(c0: &[f64]) -> FeatureMatrix {
        FeatureMatrix::new(DMatrix::from_fn(c0.len(), 2, |r, c| {
            if c == 0 {
                c0[r]
            } else {
                1.0
            }
        }))
    }

    /// Independent reimplementation: threshold, then count votes in each window directly.
    fn brute_force_vad(c0: &[f64], offset: f64, context: usize) -> Vec<bool> {
        let n = c0.len();
        let mean = c0.iter().sum::<f64>() / n as f64;
        let raw: Vec<bool> = c0.iter().map(|&x| x > mean + offset).collect();
        (0..n)
            .map(|t| {
                let mut yes = 0;
                let mut total = 0;
                for j in 0..n {
                    if (j as i64 - t as i64).unsigned_abs() as usize <= context {
                        total += 1;
                        if raw[j] {
                            yes += 1;
                        }
                    }
                }
                yes * 2 > total
            })
            .collect()
    }

    #[test]
    fn constant_energy() {
        let f = from_c0(&[3.0; 7]);
        assert_eq!(energy_vad(&f, 0.5, 2).kept(), 0);
        assert_eq!(energy_vad(&f, -0.5, 2).kept(), 7);
    }

    #[test]
    fn mean_separates() {
        let f = from_c0(&[10.0, 10.0, 0.0, 0.0]);
        assert_eq!(energy_vad(&f, 0.0, 0).keep, vec![true, true, false, false]);
    }

    #[test]
    fn zero_frames_gives_empty_mask() {
        let f = FeatureMatrix::new(DMatrix::zeros(0, 23));
        assert!(energy_vad(&f, 0.0, 2).is_empty());
    }

    #[test]
    fn majority_filter_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(1..60);
            let c0: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let got = energy_vad(&from_c0(&c0), 0.0, 2).keep;
            assert_eq!(got, brute_force_vad(&c0, 0.0, 2));
        }
    }

    proptest! {
        #[test]
        fn reversal_covariant_without_context(c0 in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            let fwd = energy_vad(&from_c0(&c0), 0.3, 0).keep;
            let rev: Vec<f64> = c0.iter().rev().copied().collect();
            let mut back = energy_vad(&from_c0(&rev), 0.3, 0).keep;
            back.reverse();
            prop_assert_eq!(fwd, back);
        }
    }

    #[test]
    fn apply_mask_cases() {
        let f = FeatureMatrix::new(DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]));
        let all = apply_mask(&f, &FrameMask { keep: vec![true; 3] }).unwrap();
        assert_eq!(all, f);
        let none = apply_mask(&f, &FrameMask { keep: vec![false; 3] }).unwrap();
        assert_eq!(none.num_frames(), 0);
        let some = apply_mask(&f, &FrameMask { keep: vec![true, false, true] }).unwrap();
        assert_eq!(some.values.as_slice(), &[1.0, 3.0]);
        assert!(matches!(
            apply_mask(&f, &FrameMask { keep: vec![true] }),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
