use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::MelFilterbank;
use super::stft::Stft;
use super::{load_waveform, MelSpectrogram, WavReadOptions, Waveform};
use crate::error::{Error, Result};
use crate::io::write_matrix;

/// Mel-to-waveform inversion.
pub trait Vocoder: Send + Sync {
    fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform>;
}

/// Pseudo-inverse mel-to-linear mapping followed by Griffin-Lim phase recovery.
#[derive(Debug, Clone)]
pub struct GriffinLim {
    pub n_iters: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Multiplicative non-negative least-squares refinements of the
    /// pseudo-inverse magnitudes.
    pub nnls_iters: usize,
}

impl Default for GriffinLim {
    fn default() -> Self {
        Self {
            n_iters: 60,
            momentum: 0.99,
            seed: 0,
            nnls_iters: 300,
        }
    }
}

impl GriffinLim {
    pub fn new(n_iters: usize) -> Self {
        Self {
            n_iters,
            ..Default::default()
        }
    }
}

/// Least-squares linear magnitudes for each mel frame, clamped at zero. Floor
/// entries are treated as zero energy.
fn mel_to_linear(mel: &MelSpectrogram, bank: &MelFilterbank, nnls_iters: usize) -> Result<Vec<f64>> {
    let (nm, nf) = (bank.n_mels(), bank.n_freqs());
    let fb = DMatrix::from_row_slice(nm, nf, bank.weights());
    let pinv = fb
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Param(format!("mel filterbank pseudo-inverse failed: {e}")))?;
    let floor = mel.floor_value();
    let mut out = vec![0.0; mel.n_frames() * nf];
    let mut energy = vec![0.0; nm];
    for t in 0..mel.n_frames() {
        for (e, &v) in energy.iter_mut().zip(mel.frame(t)) {
            *e = if v <= floor + 1e-9 { 0.0 } else { v.exp() };
        }
        let row = &mut out[t * nf..(t + 1) * nf];
        for (k, r) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (m, e) in energy.iter().enumerate() {
                acc += pinv[(k, m)] * e;
            }
            *r = acc.max(0.0);
        }
        if nnls_iters > 0 {
            refine_nnls(row, &energy, bank.weights(), nm, nf, nnls_iters);
        }
    }
    Ok(out)
}

/// Lee-Seung updates `s <- s * (Wᵀm) / (WᵀWs)` for `min |Ws - m|, s >= 0`.
/// Filters are sparse, so each row is walked over its non-zero span only.
fn refine_nnls(s: &mut [f64], m: &[f64], w: &[f64], nm: usize, nf: usize, iters: usize) {
    let spans: Vec<(usize, usize)> = (0..nm)
        .map(|j| {
            let row = &w[j * nf..(j + 1) * nf];
            let lo = row.iter().position(|&v| v > 0.0).unwrap_or(0);
            let hi = row.iter().rposition(|&v| v > 0.0).map_or(0, |i| i + 1);
            (lo, hi.max(lo))
        })
        .collect();
    let mut wtm = vec![0.0; nf];
    for (j, &(lo, hi)) in spans.iter().enumerate() {
        for k in lo..hi {
            wtm[k] += w[j * nf + k] * m[j];
        }
    }
    let peak = s.iter().copied().fold(0.0, f64::max);
    for (v, &g) in s.iter_mut().zip(&wtm) {
        if g > 0.0 {
            *v = v.max(1e-3 * peak);
        }
    }
    let mut den = vec![0.0; nf];
    for _ in 0..iters {
        den.iter_mut().for_each(|d| *d = 0.0);
        for (j, &(lo, hi)) in spans.iter().enumerate() {
            let row = &w[j * nf + lo..j * nf + hi];
            let ws: f64 = row.iter().zip(&s[lo..hi]).map(|(a, b)| a * b).sum();
            for (d, a) in den[lo..hi].iter_mut().zip(row) {
                *d += a * ws;
            }
        }
        for ((v, &g), &d) in s.iter_mut().zip(&wtm).zip(&den) {
            *v = if d > 1e-30 { *v * g / d } else { 0.0 };
        }
    }
}

impl Vocoder for GriffinLim {
    fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        if self.n_iters < 1 {
            return Err(Error::Param("Griffin-Lim needs at least one iteration".into()));
        }
        let cfg = mel.dsp_config();
        let bank = MelFilterbank::new(&cfg);
        let stft = Stft::new(cfg.n_fft, cfg.win_length, cfg.hop_length);
        let frames = mel.n_frames();
        let nf = stft.n_freqs();
        let mag = mel_to_linear(mel, &bank, self.nnls_iters)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut angles: Vec<Complex<f64>> = (0..frames * nf)
            .map(|_| Complex::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        let mut prev = vec![Complex::new(0.0, 0.0); frames * nf];
        let mut spec = vec![Complex::new(0.0, 0.0); frames * nf];
        let beta = self.momentum / (1.0 + self.momentum);
        for _ in 0..self.n_iters {
            for ((s, a), m) in spec.iter_mut().zip(&angles).zip(&mag) {
                *s = a * *m;
            }
            let signal = stft.inverse(&spec, frames);
            let rebuilt = stft.forward(&signal);
            for ((a, r), p) in angles.iter_mut().zip(&rebuilt).zip(prev.iter_mut()) {
                let z = r - *p * beta;
                let n = z.norm();
                *a = if n > 1e-16 { z / n } else { Complex::new(1.0, 0.0) };
                *p = *r;
            }
        }
        for ((s, a), m) in spec.iter_mut().zip(&angles).zip(&mag) {
            *s = a * *m;
        }
        let signal = stft.inverse(&spec, frames);
        Waveform::new(signal.into_iter().map(|v| v as f32).collect(), cfg.sample_rate)
    }
}

/// Griffin-Lim inversion with `n_iters` iterations and default settings.
pub fn invert_mel(mel: &MelSpectrogram, n_iters: usize) -> Result<Waveform> {
    GriffinLim::new(n_iters).vocode(mel)
}

/// Delegates to an external program invoked as `program [args..] <mel-file> <wav-out>`.
/// The mel matrix is written in the crate's matrix format (frames × n_mels).
#[derive(Debug, Clone)]
pub struct ExternalVocoder {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub work_dir: PathBuf,
}

impl ExternalVocoder {
    fn run(&self, mel_path: &Path, wav_path: &Path) -> Result<()> {
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(mel_path)
            .arg(wav_path)
            .status()
            .map_err(|e| Error::io(&self.program, e))?;
        if status.success() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "external vocoder {} exited with {status}",
                self.program.display()
            )))
        }
    }
}

impl Vocoder for ExternalVocoder {
    fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        std::fs::create_dir_all(&self.work_dir).map_err(|e| Error::io(&self.work_dir, e))?;
        let tag = format!("{}-{:?}", std::process::id(), std::thread::current().id())
            .replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "");
        let mel_path = self.work_dir.join(format!("mel-{tag}.mat"));
        let wav_path = self.work_dir.join(format!("out-{tag}.wav"));
        write_matrix(&mel_path, mel.n_frames(), mel.n_mels(), mel.data())?;
        self.run(&mel_path, &wav_path)?;
        let wav = load_waveform(
            &wav_path,
            &WavReadOptions {
                sample_rate: mel.sample_rate,
                ..Default::default()
            },
        );
        let _ = std::fs::remove_file(&mel_path);
        let _ = std::fs::remove_file(&wav_path);
        wav
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{mel_spectrogram, DspConfig};

    fn sine(freq: f64, len: usize) -> Waveform {
        let s = (0..len)
            .map(|n| (0.5 * (2.0 * std::f64::consts::PI * freq * n as f64 / 16000.0).sin()) as f32)
            .collect();
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn zero_iterations_is_rejected() {
        let cfg = DspConfig::default();
        let m = mel_spectrogram(&sine(440.0, 4096), &cfg).unwrap();
        assert!(matches!(invert_mel(&m, 0), Err(Error::Param(_))));
    }

    #[test]
    fn floor_mel_inverts_to_silence() {
        let cfg = DspConfig::default();
        let m = mel_spectrogram(&Waveform::silence(8000, 16000).unwrap(), &cfg).unwrap();
        let y = invert_mel(&m, 10).unwrap();
        assert_eq!(y.len(), (m.n_frames() - 1) * 256 + 1024);
        assert!(y.rms() < 1e-3);
    }

    #[test]
    fn sine_peak_survives_inversion() {
        let cfg = DspConfig::default();
        let m = mel_spectrogram(&sine(440.0, 16000), &cfg).unwrap();
        let y = invert_mel(&m, 60).unwrap();
        let r = mel_spectrogram(&y, &cfg).unwrap();
        assert_eq!(r.n_frames(), m.n_frames());
        for t in 2..m.n_frames() - 2 {
            let d = m.argmax_bin(t) as i64 - r.argmax_bin(t) as i64;
            assert!(d.abs() <= 1, "frame {t}: {} vs {}", m.argmax_bin(t), r.argmax_bin(t));
        }
    }
}
