use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Waveform;
use crate::error::{Error, Result};

pub fn mean_power(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

/// Gain applied to noise of power `noise_power` so that the mixture has the
/// requested SNR against a signal of power `signal_power`.
pub fn snr_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Mixes `noise` into `w` at `snr_db`. The noise is looped and cropped to the
/// signal length starting at a seeded random offset. `f64::INFINITY` means no noise.
pub fn augment_noise(w: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    if snr_db == f64::INFINITY {
        return Ok(w.clone());
    }
    if w.sample_rate != noise.sample_rate {
        return Err(Error::InvalidInput(format!(
            "sample rates differ: signal {} Hz, noise {} Hz",
            w.sample_rate, noise.sample_rate
        )));
    }
    if noise.is_empty() {
        return Err(Error::EmptyInput("noise waveform is empty".into()));
    }
    if snr_db.is_nan() {
        return Err(Error::InvalidInput("snr_db is NaN".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0..noise.len());
    let segment: Vec<f64> = (0..w.len())
        .map(|i| noise.samples[(offset + i) % noise.len()])
        .collect();
    let ps = mean_power(&w.samples);
    let pn = mean_power(&segment);
    if ps <= 0.0 || pn <= 0.0 {
        return Err(Error::DegenerateEnergy(format!(
            "signal power {ps}, noise power {pn}"
        )));
    }
    let g = snr_gain(ps, pn, snr_db);
    let samples = w
        .samples
        .iter()
        .zip(&segment)
        .map(|(s, n)| s + g * n)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}
