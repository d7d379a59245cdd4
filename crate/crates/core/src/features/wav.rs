//! 16-bit mono PCM WAV input/output.

use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit mono PCM, found {} channel(s) at {} bits",
                spec.channels, spec.bits_per_sample
            ),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::format(path, e.to_string()))?;
    for s in &w.samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::format(path, e.to_string()))
}
