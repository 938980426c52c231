use serde::{Deserialize, Serialize};

use super::stft::Stft;
use super::{DspConfig, Waveform};
use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, `n_mels × n_freqs` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_freqs: usize,
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &DspConfig) -> Self {
        let n_freqs = cfg.n_fft / 2 + 1;
        let mel_lo = hz_to_mel(cfg.fmin);
        let mel_hi = hz_to_mel(cfg.fmax);
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_freqs];
        for m in 0..cfg.n_mels {
            let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
            for k in 0..n_freqs {
                let f = k as f64 * bin_hz;
                let w = if f >= lo && f <= center && center > lo {
                    (f - lo) / (center - lo)
                } else if f > center && f <= hi && hi > center {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                weights[m * n_freqs + k] = w.max(0.0);
            }
        }
        Self {
            n_mels: cfg.n_mels,
            n_freqs,
            weights,
            centers_hz: points[1..=cfg.n_mels].to_vec(),
        }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_freqs(&self) -> usize {
        self.n_freqs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Center frequency of each filter in Hz.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Index of the filter whose center is nearest `hz`.
    pub fn nearest_bin(&self, hz: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.centers_hz.iter().enumerate() {
            if (c - hz).abs() < (self.centers_hz[best] - hz).abs() {
                best = i;
            }
        }
        best
    }

    /// Applies the filters to one linear magnitude frame.
    pub fn apply(&self, linear: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.weights[m * self.n_freqs..(m + 1) * self.n_freqs];
            *o = row.iter().zip(linear).map(|(w, x)| w * x).sum();
        }
    }
}

/// Log-mel energies, `frames × n_mels` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    n_frames: usize,
    n_mels: usize,
    data: Vec<f64>,
    pub hop_length: usize,
    pub win_length: usize,
    pub n_fft: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
    pub log_floor: f64,
}

impl MelSpectrogram {
    /// Wraps raw log-mel values, clamping every entry to the log floor.
    pub fn from_frames(data: Vec<f64>, n_mels: usize, cfg: &DspConfig) -> Result<Self> {
        if n_mels == 0 || data.len() % n_mels != 0 {
            return Err(Error::Shape {
                op: "MelSpectrogram::from_frames",
                lhs: vec![data.len()],
                rhs: vec![n_mels],
            });
        }
        let floor = cfg.log_floor_value();
        let mut data = data;
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(Error::Data("mel entries must be finite".into()));
            }
            if *v < floor {
                *v = floor;
            }
        }
        Ok(Self {
            n_frames: data.len() / n_mels,
            n_mels,
            data,
            hop_length: cfg.hop_length,
            win_length: cfg.win_length,
            n_fft: cfg.n_fft,
            fmin: cfg.fmin,
            fmax: cfg.fmax,
            sample_rate: cfg.sample_rate,
            log_floor: cfg.log_floor,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn floor_value(&self) -> f64 {
        self.log_floor.ln()
    }

    /// The analysis parameters this spectrogram was computed with.
    pub fn dsp_config(&self) -> DspConfig {
        DspConfig {
            sample_rate: self.sample_rate,
            n_fft: self.n_fft,
            win_length: self.win_length,
            hop_length: self.hop_length,
            n_mels: self.n_mels,
            fmin: self.fmin,
            fmax: self.fmax,
            log_floor: self.log_floor,
        }
    }

    /// Index of the loudest bin in frame `t`; ties go to the lowest bin.
    pub fn argmax_bin(&self, t: usize) -> usize {
        let f = self.frame(t);
        let mut best = 0;
        for (i, v) in f.iter().enumerate() {
            if *v > f[best] {
                best = i;
            }
        }
        best
    }

    /// Per-bin time average.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_mels];
        for t in 0..self.n_frames {
            for (o, v) in out.iter_mut().zip(self.frame(t)) {
                *o += v;
            }
        }
        let n = self.n_frames.max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// Log-mel analysis of `x`: magnitude STFT, triangular mel filters, natural
/// log with floor clamping.
pub fn mel_spectrogram(x: &Waveform, cfg: &DspConfig) -> Result<MelSpectrogram> {
    let stft = Stft::new(cfg.n_fft, cfg.win_length, cfg.hop_length);
    let bank = MelFilterbank::new(cfg);
    mel_with(x, cfg, &stft, &bank)
}

pub(crate) fn mel_with(
    x: &Waveform,
    cfg: &DspConfig,
    stft: &Stft,
    bank: &MelFilterbank,
) -> Result<MelSpectrogram> {
    if x.sample_rate() != cfg.sample_rate {
        return Err(Error::Param(format!(
            "waveform sample rate {} does not match analysis rate {}",
            x.sample_rate(),
            cfg.sample_rate
        )));
    }
    if x.len() < cfg.win_length {
        return Err(Error::Length(format!(
            "{} samples is shorter than one {}-sample window",
            x.len(),
            cfg.win_length
        )));
    }
    let signal: Vec<f64> = x.samples().iter().map(|&s| s as f64).collect();
    let mag = stft.magnitude(&signal);
    Ok(linear_to_log_mel(&mag, cfg, bank))
}

pub(crate) fn linear_to_log_mel(mag: &[f64], cfg: &DspConfig, bank: &MelFilterbank) -> MelSpectrogram {
    let nf = bank.n_freqs();
    let frames = mag.len() / nf;
    let mut data = vec![0.0; frames * cfg.n_mels];
    for t in 0..frames {
        let out = &mut data[t * cfg.n_mels..(t + 1) * cfg.n_mels];
        bank.apply(&mag[t * nf..(t + 1) * nf], out);
        for v in out.iter_mut() {
            *v = v.max(cfg.log_floor).ln();
        }
    }
    MelSpectrogram {
        n_frames: frames,
        n_mels: cfg.n_mels,
        data,
        hop_length: cfg.hop_length,
        win_length: cfg.win_length,
        n_fft: cfg.n_fft,
        fmin: cfg.fmin,
        fmax: cfg.fmax,
        sample_rate: cfg.sample_rate,
        log_floor: cfg.log_floor,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, len: usize, amp: f64) -> Waveform {
        let s = (0..len)
            .map(|n| (amp * (2.0 * std::f64::consts::PI * freq * n as f64 / 16000.0).sin()) as f32)
            .collect();
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 440.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn silence_is_floor_everywhere() {
        let cfg = DspConfig::default();
        let m = mel_spectrogram(&Waveform::silence(16000, 16000).unwrap(), &cfg).unwrap();
        assert_eq!(m.n_frames(), 59);
        assert_eq!(m.n_mels(), 80);
        let floor = cfg.log_floor_value();
        assert!(m.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn sine_peaks_at_nearest_center() {
        let cfg = DspConfig::default();
        let bank = MelFilterbank::new(&cfg);
        // Oracle: nearest center from the closed-form mel points.
        let mel_lo = hz_to_mel(0.0);
        let mel_hi = hz_to_mel(8000.0);
        let mut expected = 0;
        let mut best = f64::INFINITY;
        for m in 0..80 {
            let c = mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) as f64 / 81.0);
            if (c - 440.0).abs() < best {
                best = (c - 440.0).abs();
                expected = m;
            }
        }
        assert_eq!(bank.nearest_bin(440.0), expected);
        let m = mel_spectrogram(&sine(440.0, 16000, 0.5), &cfg).unwrap();
        for t in 0..m.n_frames() {
            assert_eq!(m.argmax_bin(t), expected, "frame {t}");
        }
    }

    #[test]
    fn short_input_is_a_length_error() {
        let cfg = DspConfig::default();
        let err = mel_spectrogram(&Waveform::silence(1000, 16000).unwrap(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Length(_)));
    }

    #[test]
    fn analysis_is_deterministic_and_monotone_in_gain() {
        let cfg = DspConfig::default();
        let x = sine(523.0, 8000, 0.2);
        let a = mel_spectrogram(&x, &cfg).unwrap();
        let b = mel_spectrogram(&x, &cfg).unwrap();
        assert_eq!(a, b);
        let louder = mel_spectrogram(&x.scaled(2.0), &cfg).unwrap();
        for (q, l) in a.data().iter().zip(louder.data()) {
            assert!(l >= q);
        }
    }
}
