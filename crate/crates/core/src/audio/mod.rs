//! Waveform I/O, log-mel analysis and mel inversion.

mod mel;
mod resample;
mod stft;
mod vocoder;
mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mel::{hz_to_mel, mel_to_hz, mel_spectrogram, MelFilterbank, MelSpectrogram};
pub use resample::{resample, resample_to_len};
pub use stft::{frame_count, Stft};
pub use vocoder::{invert_mel, ExternalVocoder, GriffinLim, Vocoder};
pub use wav::{load_waveform, write_wav, WavReadOptions};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono PCM signal with amplitudes nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Param("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Length("waveform must contain at least one sample".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        let ss: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (ss / self.samples.len() as f64).sqrt()
    }

    /// Returns a copy scaled by `gain`.
    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// STFT and mel analysis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Magnitudes are clamped to this value before the natural log.
    pub log_floor: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            n_fft: 1024,
            win_length: 1024,
            hop_length: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("dsp.sample_rate must be positive".into()));
        }
        if self.win_length == 0 || self.hop_length == 0 || self.n_fft == 0 || self.n_mels == 0 {
            return Err(Error::Config(
                "dsp window, hop, n_fft and n_mels must be positive".into(),
            ));
        }
        if self.win_length > self.n_fft {
            return Err(Error::Config("dsp.win_length must not exceed n_fft".into()));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin) {
            return Err(Error::Config("dsp requires 0 <= fmin < fmax".into()));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 + 1e-9 {
            return Err(Error::Config("dsp.fmax exceeds the Nyquist frequency".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("dsp.log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Value of a mel entry with zero energy.
    pub fn log_floor_value(&self) -> f64 {
        self.log_floor.ln()
    }
}
