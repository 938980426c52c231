use std::path::Path;

use super::{resample, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WavReadOptions {
    pub sample_rate: u32,
    /// Average channels of multi-channel files instead of rejecting them.
    pub downmix: bool,
    /// Resample files recorded at another rate instead of rejecting them.
    pub resample: bool,
}

impl Default for WavReadOptions {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            downmix: true,
            resample: true,
        }
    }
}

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a 16-bit PCM WAV file as a mono waveform at `opts.sample_rate`.
pub fn load_waveform(path: impl AsRef<Path>, opts: &WavReadOptions) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit integer PCM, found {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if channels > 1 && !opts.downmix {
        return Err(Error::Format(format!(
            "{}: {channels}-channel file and downmixing is disabled",
            path.display()
        )));
    }
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| hound_err(path, e))?;
    let mono: Vec<f32> = raw
        .chunks(channels)
        .map(|c| c.iter().map(|&s| s as f32 / 32768.0).sum::<f32>() / channels as f32)
        .collect();
    if mono.is_empty() {
        return Err(Error::Length(format!("{}: no samples", path.display())));
    }
    let wave = Waveform::new(mono, spec.sample_rate)?;
    if spec.sample_rate == opts.sample_rate {
        Ok(wave)
    } else if opts.resample {
        resample(&wave, opts.sample_rate)
    } else {
        Err(Error::Format(format!(
            "{}: sample rate {} differs from {} and resampling is disabled",
            path.display(),
            spec.sample_rate,
            opts.sample_rate
        )))
    }
}

/// Writes `x` as mono 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, x: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: x.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in x.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| hound_err(path, e))?;
    }
    writer.finalize().map_err(|e| hound_err(path, e))
}
