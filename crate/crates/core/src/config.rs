//! Experiment configuration: one TOML file covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{DspConfig, GriffinLim};
use crate::augment::BaselineSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::quantize::{KMeansConfig, MelFeatures};
use crate::ser::SerConfig;
use crate::toy::ToyCorpusConfig;
use crate::train::{StylePretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Read precomputed `<utt_id>.mat` matrices from here instead of using log-mels.
    pub dir: Option<PathBuf>,
    pub dim: Option<usize>,
    pub frame_rate: Option<f64>,
    pub normalize: bool,
    pub dynamic_range: f64,
    pub silence_threshold: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let m = MelFeatures::default();
        Self {
            dir: None,
            dim: None,
            frame_rate: None,
            normalize: m.normalize,
            dynamic_range: m.dynamic_range,
            silence_threshold: m.silence_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocoderConfig {
    pub n_iters: usize,
    pub momentum: f64,
    pub nnls_iters: usize,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        let g = GriffinLim::default();
        Self { n_iters: g.n_iters, momentum: g.momentum, nnls_iters: g.nnls_iters }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Generated utterances per source.
    pub n: usize,
    pub balance: bool,
    pub drop_truncated: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { n: 8, balance: false, drop_truncated: false }
    }
}

/// Output locations. Relative paths resolve against `work_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { work_dir: PathBuf::from("runs") }
    }
}

impl PathsConfig {
    pub fn resolve(&self, p: impl AsRef<Path>) -> PathBuf {
        let p = p.as_ref();
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.work_dir.join(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dsp: DspConfig,
    pub features: FeatureConfig,
    pub quantizer: KMeansConfig,
    pub model: ModelConfig,
    /// Style-encoder initialization run before `train`.
    pub pretrain: StylePretrainConfig,
    pub train: TrainConfig,
    pub vocoder: VocoderConfig,
    pub augment: AugmentConfig,
    pub baseline: BaselineSpec,
    pub ser: SerConfig,
    pub toy: ToyCorpusConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dsp: DspConfig::default(),
            features: FeatureConfig::default(),
            quantizer: KMeansConfig::default(),
            model: ModelConfig::default(),
            pretrain: StylePretrainConfig::default(),
            train: TrainConfig::default(),
            vocoder: VocoderConfig::default(),
            augment: AugmentConfig::default(),
            baseline: BaselineSpec::default(),
            ser: SerConfig::default(),
            toy: ToyCorpusConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        self.baseline.validate()?;
        self.ser.validate()?;
        if self.quantizer.k == 0 {
            return Err(Error::Config("quantizer.k must be positive".into()));
        }
        if self.model.vocab != self.quantizer.k {
            return Err(Error::Config(format!(
                "model.vocab ({}) must equal quantizer.k ({})",
                self.model.vocab, self.quantizer.k
            )));
        }
        if self.model.n_mels != self.dsp.n_mels {
            return Err(Error::Config(format!(
                "model.n_mels ({}) must equal dsp.n_mels ({})",
                self.model.n_mels, self.dsp.n_mels
            )));
        }
        if self.features.dir.is_some() && (self.features.dim.is_none() || self.features.frame_rate.is_none()) {
            return Err(Error::Config("features.dir requires features.dim and features.frame_rate".into()));
        }
        if !(0.0..1.0).contains(&self.vocoder.momentum) && self.vocoder.momentum != 0.0 {
            return Err(Error::Config("vocoder.momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn mel_features(&self) -> MelFeatures {
        MelFeatures {
            dsp: self.dsp.clone(),
            normalize: self.features.normalize,
            dynamic_range: self.features.dynamic_range,
            silence_threshold: self.features.silence_threshold,
        }
    }

    pub fn vocoder(&self) -> GriffinLim {
        GriffinLim {
            n_iters: self.vocoder.n_iters,
            momentum: self.vocoder.momentum,
            nnls_iters: self.vocoder.nnls_iters,
            seed: self.seed,
        }
    }

    /// Small settings that make the full pipeline run in minutes on the toy corpus.
    pub fn toy() -> Self {
        let k = 24;
        Self {
            quantizer: KMeansConfig { k, ..Default::default() },
            model: ModelConfig::toy(k),
            train: TrainConfig { sampling_ramp: 3000, max_epochs: 150, early_stop_patience: 20, ..Default::default() },
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for cfg in [ExperimentConfig::default(), ExperimentConfig::toy()] {
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let err = ExperimentConfig::from_toml("[train]\nbase_lrr = 0.1\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("base_lrr")), "{err}");
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[augment]\nn = 4\nbalance = true\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.augment, AugmentConfig { n: 4, balance: true, drop_truncated: false });
        assert_eq!(cfg.quantizer.k, 200);
    }

    #[test]
    fn cross_section_checks() {
        let e = ExperimentConfig::from_toml("[quantizer]\nk = 50\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("model.vocab")));
        assert!(ExperimentConfig::from_toml("[quantizer]\nk = 50\n[model]\nvocab = 50\n").is_ok());
        assert!(ExperimentConfig::from_toml("[train]\nbase_lr = -1.0\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
