use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Number of frames under center-free framing, or `None` when the signal is
/// shorter than one window.
pub fn frame_count(len: usize, win_length: usize, hop_length: usize) -> Option<usize> {
    if len < win_length || hop_length == 0 {
        None
    } else {
        Some(1 + (len - win_length) / hop_length)
    }
}

/// Short-time Fourier transform with a periodic Hann window and no centering:
/// frame `t` covers samples `[t * hop, t * hop + win)`.
#[derive(Clone)]
pub struct Stft {
    n_fft: usize,
    win_length: usize,
    hop_length: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("n_fft", &self.n_fft)
            .field("win_length", &self.win_length)
            .field("hop_length", &self.hop_length)
            .finish()
    }
}

impl Stft {
    pub fn new(n_fft: usize, win_length: usize, hop_length: usize) -> Self {
        assert!(win_length <= n_fft && win_length > 0 && hop_length > 0);
        let window = (0..win_length)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win_length as f64).cos()
            })
            .collect();
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            win_length,
            hop_length,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn n_freqs(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn hop_length(&self) -> usize {
        self.hop_length
    }

    pub fn win_length(&self) -> usize {
        self.win_length
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn frames(&self, len: usize) -> Option<usize> {
        frame_count(len, self.win_length, self.hop_length)
    }

    /// Complex spectrum, `T × (n_fft/2 + 1)` row-major. Empty when `x` is
    /// shorter than one window.
    pub fn forward(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let Some(frames) = self.frames(x.len()) else {
            return Vec::new();
        };
        let nf = self.n_freqs();
        let mut out = Vec::with_capacity(frames * nf);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * self.hop_length;
            for v in buf.iter_mut() {
                *v = Complex::new(0.0, 0.0);
            }
            for (n, w) in self.window.iter().enumerate() {
                buf[n] = Complex::new(x[start + n] * w, 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            out.extend_from_slice(&buf[..nf]);
        }
        out
    }

    pub fn magnitude(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).into_iter().map(|c| c.norm()).collect()
    }

    /// Weighted overlap-add inverse of a `frames × n_freqs` spectrum. The output
    /// has `(frames - 1) * hop + win` samples.
    pub fn inverse(&self, spec: &[Complex<f64>], frames: usize) -> Vec<f64> {
        let nf = self.n_freqs();
        debug_assert_eq!(spec.len(), frames * nf);
        if frames == 0 {
            return Vec::new();
        }
        let len = (frames - 1) * self.hop_length + self.win_length;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let scale = 1.0 / self.n_fft as f64;
        for t in 0..frames {
            let row = &spec[t * nf..(t + 1) * nf];
            buf[..nf].copy_from_slice(row);
            // Hermitian completion for a real signal.
            for k in nf..self.n_fft {
                buf[k] = row[self.n_fft - k].conj();
            }
            buf[0].im = 0.0;
            if self.n_fft % 2 == 0 {
                buf[nf - 1].im = 0.0;
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.hop_length;
            for (n, w) in self.window.iter().enumerate() {
                out[start + n] += buf[n].re * scale * w;
                norm[start + n] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_matches_closed_form() {
        assert_eq!(frame_count(16000, 1024, 256), Some(59));
        assert_eq!(frame_count(1024, 1024, 256), Some(1));
        assert_eq!(frame_count(1023, 1024, 256), None);
        for len in 1024..3000 {
            assert_eq!(
                frame_count(len, 1024, 256).unwrap(),
                1 + (len - 1024) / 256
            );
        }
    }

    #[test]
    fn inverse_reconstructs_interior() {
        let stft = Stft::new(512, 512, 128);
        let x: Vec<f64> = (0..4096)
            .map(|n| (n as f64 * 0.05).sin() + 0.3 * (n as f64 * 0.31).cos())
            .collect();
        let spec = stft.forward(&x);
        let frames = stft.frames(x.len()).unwrap();
        let y = stft.inverse(&spec, frames);
        // Away from the edges the window-square normalisation is exact.
        for n in 512..y.len() - 512 {
            assert!((x[n] - y[n]).abs() < 1e-9, "sample {n}: {} vs {}", x[n], y[n]);
        }
    }
}
