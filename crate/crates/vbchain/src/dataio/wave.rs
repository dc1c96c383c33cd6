//! Waveform-level preprocessing and the frame-count arithmetic of the
//! reference convolutional front end.

use std::path::Path;

use crate::error::{Error, Result};

/// Kernel widths and strides of the seven temporal convolutions in the
/// reference feature encoder.
const CONV_STAGES: [(usize, usize); 7] =
    [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)];

/// Result of [`peak_normalize`]; `all_zero` flags the degenerate input that
/// was returned unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakNormalized {
    pub samples: Vec<f32>,
    pub all_zero: bool,
}

/// Scales the waveform so its maximum absolute sample is exactly 1.
/// An all-zero waveform is returned unchanged with `all_zero` set.
pub fn peak_normalize(waveform: &[f32]) -> Result<PeakNormalized> {
    if waveform.is_empty() {
        return Err(Error::InvalidArgument("peak_normalize: empty waveform".into()));
    }
    if waveform.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("waveform".into()));
    }
    let peak = waveform.iter().fold(0.0f32, |m, &s| m.max(s.abs()));
    if peak == 0.0 {
        return Ok(PeakNormalized { samples: waveform.to_vec(), all_zero: true });
    }
    Ok(PeakNormalized {
        samples: waveform.iter().map(|&s| s / peak).collect(),
        all_zero: false,
    })
}

/// Number of frames the reference encoder produces for `num_samples` input
/// samples: `t = floor((t - k) / s) + 1` through the seven conv stages.
pub fn expected_frames(num_samples: usize) -> Result<usize> {
    let mut t = num_samples;
    for (kernel, stride) in CONV_STAGES {
        if t < kernel {
            return Err(Error::InvalidArgument(format!(
                "input of {num_samples} samples is too short to produce one frame (need >= 400)"
            )));
        }
        t = (t - kernel) / stride + 1;
    }
    Ok(t)
}

/// Reads a mono WAV file; 16-bit PCM and 32-bit float formats are accepted.
pub fn read_wav_mono(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "{}: expected mono audio, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().collect::<std::result::Result<_, _>>()?
        }
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (format, bits) => {
            return Err(Error::InvalidArgument(format!(
                "{}: unsupported sample format {format:?} at {bits} bits",
                path.display()
            )));
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav_mono(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}
