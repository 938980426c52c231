use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::audio::{mel_spectrogram, DspConfig, Waveform};
use crate::error::{Error, Result};
use crate::io::read_matrix;

/// Frame-level features, `n_frames × dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_frames * dim || dim == 0 {
            return Err(Error::Shape {
                op: "FeatureMatrix::new",
                lhs: vec![n_frames, dim],
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("features must be finite".into()));
        }
        Ok(Self { n_frames, dim, data })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Maps a waveform to continuous frame features. Output frame count must be a
/// deterministic function of the input length.
pub trait FeatureExtractor: Send + Sync {
    fn frame_rate(&self) -> f64;
    fn dim(&self) -> usize;
    /// `utt_id` lets file-backed extractors find precomputed features.
    fn extract(&self, utt_id: &str, x: &Waveform) -> Result<FeatureMatrix>;
}

/// Log-mel frames, optionally level-normalized so that loudness and envelope do
/// not influence cluster assignment.
///
/// With `normalize` set, each frame is clamped to `dynamic_range` below its own
/// peak and then has its mean removed. Frames whose peak is under
/// `silence_threshold` become the zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelFeatures {
    pub dsp: DspConfig,
    pub normalize: bool,
    /// Natural-log units.
    pub dynamic_range: f64,
    /// Natural-log units.
    pub silence_threshold: f64,
}

impl Default for MelFeatures {
    fn default() -> Self {
        Self {
            dsp: DspConfig::default(),
            normalize: true,
            dynamic_range: 4.0,
            silence_threshold: -4.0,
        }
    }
}

impl FeatureExtractor for MelFeatures {
    fn frame_rate(&self) -> f64 {
        self.dsp.sample_rate as f64 / self.dsp.hop_length as f64
    }

    fn dim(&self) -> usize {
        self.dsp.n_mels
    }

    fn extract(&self, _utt_id: &str, x: &Waveform) -> Result<FeatureMatrix> {
        let mel = mel_spectrogram(x, &self.dsp)?;
        let mut data = mel.data().to_vec();
        if self.normalize {
            for frame in data.chunks_exact_mut(self.dsp.n_mels) {
                let peak = frame.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if peak < self.silence_threshold {
                    frame.iter_mut().for_each(|v| *v = 0.0);
                    continue;
                }
                let lo = peak - self.dynamic_range;
                frame.iter_mut().for_each(|v| *v = v.max(lo));
                let mean = frame.iter().sum::<f64>() / frame.len() as f64;
                frame.iter_mut().for_each(|v| *v -= mean);
            }
        }
        FeatureMatrix::new(mel.n_frames(), self.dsp.n_mels, data)
    }
}

/// Reads `<dir>/<utt_id>.mat` matrices produced by an external model.
#[derive(Debug, Clone)]
pub struct FileFeatures {
    pub dir: PathBuf,
    pub dim: usize,
    pub frame_rate: f64,
}

impl FeatureExtractor for FileFeatures {
    fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, utt_id: &str, _x: &Waveform) -> Result<FeatureMatrix> {
        let path = self.dir.join(format!("{utt_id}.mat"));
        let (rows, cols, data) = read_matrix(&path)?;
        if cols != self.dim {
            return Err(Error::Config(format!(
                "{} has {cols} feature columns, expected {}",
                path.display(),
                self.dim
            )));
        }
        FeatureMatrix::new(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_matrix;

    #[test]
    fn normalization_removes_level() {
        let fe = MelFeatures::default();
        // Broadband input keeps every mel bin above the log floor.
        let mut state = 12345u32;
        let x: Vec<f32> = (0..8000)
            .map(|_| {
                state = state.wrapping_mul(1664525).wrapping_add(1013904223);
                (state >> 8) as f32 / (1u32 << 24) as f32 * 0.6 - 0.3
            })
            .collect();
        let w = Waveform::new(x, 16000).unwrap();
        let a = fe.extract("a", &w).unwrap();
        let b = fe.extract("a", &w.scaled(0.5)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn file_features_check_dimension() {
        let dir = tempfile::tempdir().unwrap();
        write_matrix(&dir.path().join("u1.mat"), 3, 2, &[0.0; 6]).unwrap();
        let w = Waveform::silence(10, 16000).unwrap();
        let ok = FileFeatures { dir: dir.path().into(), dim: 2, frame_rate: 50.0 };
        assert_eq!(ok.extract("u1", &w).unwrap().n_frames(), 3);
        let bad = FileFeatures { dir: dir.path().into(), dim: 4, frame_rate: 50.0 };
        assert!(matches!(bad.extract("u1", &w), Err(Error::Config(_))));
    }
}
