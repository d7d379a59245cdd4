//! Acoustic front-end: MFCC / log-mel filterbank extraction, energy VAD and
//! additive-noise augmentation.

mod augment;
mod mel;
mod vad;
pub mod wav;

pub use augment::{augment_noise, mean_power, snr_gain};
pub use mel::{compute_features, dct_matrix, hamming_window, MelBank};
pub use vad::{apply_mask, energy_vad, FrameMask, VadConfig};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// Amplitudes in [-1, 1].
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc,
    Fbank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    /// Output columns. For fbank this is also the number of mel bins.
    pub num_coeffs: usize,
    /// Mel bins feeding the DCT (MFCC only).
    pub num_mel_bins: usize,
    pub low_freq: f64,
    pub high_freq: f64,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub preemphasis: f64,
    /// Sliding-window cepstral mean normalization, in frames. Off when `None`.
    pub cmn_window: Option<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            kind: FeatureKind::Mfcc,
            num_coeffs: 23,
            num_mel_bins: 23,
            low_freq: 20.0,
            high_freq: 3700.0,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            preemphasis: 0.97,
            cmn_window: None,
        }
    }
}

impl FeatureConfig {
    pub fn fbank() -> Self {
        Self {
            kind: FeatureKind::Fbank,
            ..Self::default()
        }
    }

    pub fn mel_bins(&self) -> usize {
        match self.kind {
            FeatureKind::Mfcc => self.num_mel_bins,
            FeatureKind::Fbank => self.num_coeffs,
        }
    }

    pub fn frame_length(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn frame_shift(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    /// Number of frames produced for `num_samples` samples, zero if shorter than a frame.
    pub fn num_frames(&self, num_samples: usize, sample_rate: u32) -> usize {
        let win = self.frame_length(sample_rate);
        let shift = self.frame_shift(sample_rate);
        if num_samples < win || shift == 0 {
            0
        } else {
            (num_samples - win) / shift + 1
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.num_coeffs == 0 {
            return Err(Error::Config("num_coeffs must be at least 1".into()));
        }
        if self.kind == FeatureKind::Mfcc && self.num_coeffs > self.num_mel_bins {
            return Err(Error::Config(format!(
                "num_coeffs {} exceeds num_mel_bins {}",
                self.num_coeffs, self.num_mel_bins
            )));
        }
        if !(self.low_freq >= 0.0 && self.low_freq < self.high_freq && self.high_freq <= nyquist)
        {
            return Err(Error::Config(format!(
                "frequency range [{}, {}] invalid for sample rate {}",
                self.low_freq, self.high_freq, sample_rate
            )));
        }
        if self.frame_length(sample_rate) < 2 || self.frame_shift(sample_rate) == 0 {
            return Err(Error::Config("frame length/shift too small".into()));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return Err(Error::Config("preemphasis must lie in [0, 1)".into()));
        }
        if self.cmn_window == Some(0) {
            return Err(Error::Config("cmn_window must be positive".into()));
        }
        Ok(())
    }
}

/// Frames × coefficients. For MFCC, column 0 is C0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub frame_shift_ms: f64,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self {
            values,
            frame_shift_ms: 10.0,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_coeffs(&self) -> usize {
        self.values.ncols()
    }
}

/// Subtracts the mean over a centered window of `window` frames from each frame.
pub fn sliding_cmn(values: &DMatrix<f64>, window: usize) -> DMatrix<f64> {
    let frames = values.nrows();
    let mut out = values.clone();
    if frames == 0 || window == 0 {
        return out;
    }
    let half = window / 2;
    for t in 0..frames {
        let lo = t.saturating_sub(half);
        let hi = (t + window - half).min(frames);
        let n = (hi - lo) as f64;
        for c in 0..values.ncols() {
            let mean: f64 = (lo..hi).map(|i| values[(i, c)]).sum::<f64>() / n;
            out[(t, c)] -= mean;
        }
    }
    out
}
