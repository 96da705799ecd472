//! 16-bit PCM mono WAV read/write.

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `samples` (nominally in `[-1, 1]`, clipped otherwise) as 16-bit
/// PCM mono at `sample_rate`.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Format(format!("wav create {path:?}: {e}")))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Format(format!("wav write: {e}")))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Format(format!("wav finalize: {e}")))?;
    Ok(())
}

/// Reads a 16-bit PCM mono WAV; returns samples in `[-1, 1]` and the rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Format(format!("wav open {path:?}: {e}")))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "expected 16-bit mono wav, got {} ch / {} bits",
            spec.channels, spec.bits_per_sample
        )));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let samples = samples.map_err(|e| Error::Format(format!("wav read: {e}")))?;
    Ok((
        samples.iter().map(|&v| v as f64 / 32767.0).collect(),
        spec.sample_rate,
    ))
}
