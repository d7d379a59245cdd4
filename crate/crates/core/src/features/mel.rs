use std::f64::consts::PI;

use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};

use super::{sliding_cmn, FeatureConfig, FeatureKind, FeatureMatrix, Waveform};
use crate::error::{Error, Result};

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

/// Triangular filters on the mel scale, evaluated at FFT bin centers.
#[derive(Debug, Clone)]
pub struct MelBank {
    /// num_bins × (fft_len / 2 + 1)
    pub weights: DMatrix<f64>,
    /// Center frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelBank {
    pub fn new(num_bins: usize, low: f64, high: f64, sample_rate: u32, fft_len: usize) -> Self {
        let mel_lo = hz_to_mel(low);
        let mel_hi = hz_to_mel(high);
        let delta = (mel_hi - mel_lo) / (num_bins + 1) as f64;
        let num_fft_bins = fft_len / 2 + 1;
        let bin_hz = sample_rate as f64 / fft_len as f64;
        let mut weights = DMatrix::zeros(num_bins, num_fft_bins);
        let mut centers_hz = Vec::with_capacity(num_bins);
        for b in 0..num_bins {
            let left = mel_lo + b as f64 * delta;
            let center = left + delta;
            let right = center + delta;
            centers_hz.push(700.0 * ((center / 1127.0).exp() - 1.0));
            for k in 0..num_fft_bins {
                let mel = hz_to_mel(k as f64 * bin_hz);
                if mel > left && mel < right {
                    weights[(b, k)] = if mel <= center {
                        (mel - left) / (center - left)
                    } else {
                        (right - mel) / (right - center)
                    };
                }
            }
        }
        Self {
            weights,
            centers_hz,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.weights.nrows()
    }
}

pub fn hamming_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Orthonormal DCT-II basis: rows are cepstral indices, columns mel bins.
pub fn dct_matrix(num_coeffs: usize, num_bins: usize) -> DMatrix<f64> {
    let n = num_bins as f64;
    DMatrix::from_fn(num_coeffs, num_bins, |k, j| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (PI * k as f64 * (j as f64 + 0.5) / n).cos()
    })
}

/// Extracts MFCC or log-mel filterbank features, one row per frame.
pub fn compute_features(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    cfg.validate(w.sample_rate)?;
    let win = cfg.frame_length(w.sample_rate);
    let shift = cfg.frame_shift(w.sample_rate);
    let frames = cfg.num_frames(w.len(), w.sample_rate);
    if frames == 0 {
        return Err(Error::EmptyInput(format!(
            "waveform of {} samples is shorter than one {}-sample frame",
            w.len(),
            win
        )));
    }
    let fft_len = win.next_power_of_two();
    let bank = MelBank::new(cfg.mel_bins(), cfg.low_freq, cfg.high_freq, w.sample_rate, fft_len);
    let window = hamming_window(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_len);
    let dct = match cfg.kind {
        FeatureKind::Mfcc => Some(dct_matrix(cfg.num_coeffs, cfg.num_mel_bins)),
        FeatureKind::Fbank => None,
    };

    let num_fft_bins = fft_len / 2 + 1;
    let mut out = DMatrix::zeros(frames, cfg.num_coeffs);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut power = nalgebra::DVector::zeros(num_fft_bins);
    for t in 0..frames {
        let frame = &w.samples[t * shift..t * shift + win];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for i in (0..win).rev() {
            let prev = if i == 0 { frame[0] } else { frame[i - 1] };
            buf[i].re = (frame[i] - cfg.preemphasis * prev) * window[i];
        }
        fft.process(&mut buf);
        for k in 0..num_fft_bins {
            power[k] = buf[k].norm_sqr();
        }
        let log_mel = (&bank.weights * &power).map(|e| e.max(f64::EPSILON).ln());
        match &dct {
            Some(d) => out.set_row(t, &(d * log_mel).transpose()),
            None => out.set_row(t, &log_mel.transpose()),
        }
    }
    if let Some(window) = cfg.cmn_window {
        out = sliding_cmn(&out, window);
    }
    Ok(FeatureMatrix {
        values: out,
        frame_shift_ms: cfg.frame_shift_ms,
    })
}
