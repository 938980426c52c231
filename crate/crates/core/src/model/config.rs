use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticConfig {
    pub embed_dim: usize,
    pub conv_channels: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    /// Hidden size per direction.
    pub lstm_hidden: usize,
    pub dropout: f64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            conv_channels: 512,
            conv_layers: 3,
            kernel: 5,
            lstm_hidden: 256,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleConfig {
    pub channels: usize,
    pub first_kernel: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    /// Res2Net scale: the number of channel groups.
    pub scale: usize,
    pub se_dim: usize,
    pub attention_dim: usize,
    pub embedding_dim: usize,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            channels: 512,
            first_kernel: 5,
            kernel: 3,
            dilations: vec![2, 3, 4],
            scale: 8,
            se_dim: 128,
            attention_dim: 128,
            embedding_dim: 192,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub prenet_dim: usize,
    /// Prenet dropout, applied in training and inference alike.
    pub prenet_dropout: f64,
    pub attention_rnn_dim: usize,
    pub decoder_rnn_dim: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    /// Free-running decode stops after `max_len_ratio × L` frames.
    pub max_len_ratio: usize,
    pub stop_threshold: f64,
    pub gate_pos_weight: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            prenet_dim: 256,
            prenet_dropout: 0.5,
            attention_rnn_dim: 1024,
            decoder_rnn_dim: 1024,
            attention_dim: 128,
            location_filters: 32,
            location_kernel: 31,
            max_len_ratio: 30,
            stop_threshold: 0.5,
            gate_pos_weight: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Unit vocabulary size (the codebook's k).
    pub vocab: usize,
    pub n_mels: usize,
    pub semantic: SemanticConfig,
    pub style: StyleConfig,
    pub decoder: DecoderConfig,
    pub mel_norm: MelNorm,
}

/// Fixed affine map applied to log-mel values entering and leaving the
/// network: `(x - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelNorm {
    pub offset: f64,
    pub scale: f64,
}

impl Default for MelNorm {
    fn default() -> Self {
        Self { offset: -5.0, scale: 3.0 }
    }
}

impl MelNorm {
    pub fn forward(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    pub fn inverse(&self, y: f64) -> f64 {
        y * self.scale + self.offset
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 200,
            n_mels: 80,
            semantic: SemanticConfig::default(),
            style: StyleConfig::default(),
            decoder: DecoderConfig::default(),
            mel_norm: MelNorm::default(),
        }
    }
}

impl ModelConfig {
    /// Reduced widths for single-core toy experiments.
    pub fn toy(vocab: usize) -> Self {
        Self {
            vocab,
            n_mels: 80,
            semantic: SemanticConfig {
                embed_dim: 64,
                conv_channels: 64,
                conv_layers: 3,
                kernel: 5,
                lstm_hidden: 32,
                dropout: 0.1,
            },
            style: StyleConfig {
                channels: 32,
                first_kernel: 5,
                kernel: 3,
                dilations: vec![2, 3, 4],
                scale: 4,
                se_dim: 16,
                attention_dim: 16,
                embedding_dim: 16,
            },
            decoder: DecoderConfig {
                prenet_dim: 64,
                prenet_dropout: 0.5,
                attention_rnn_dim: 128,
                decoder_rnn_dim: 128,
                attention_dim: 64,
                location_filters: 8,
                location_kernel: 31,
                max_len_ratio: 30,
                stop_threshold: 0.5,
                gate_pos_weight: 5.0,
            },
            mel_norm: MelNorm::default(),
        }
    }

    /// Width of the conditioned memory: semantic output plus style vector.
    pub fn memory_dim(&self) -> usize {
        2 * self.semantic.lstm_hidden + self.style.embedding_dim
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.semantic;
        let p = &self.style;
        let d = &self.decoder;
        let positive = [
            ("vocab", self.vocab),
            ("n_mels", self.n_mels),
            ("semantic.embed_dim", s.embed_dim),
            ("semantic.conv_channels", s.conv_channels),
            ("semantic.kernel", s.kernel),
            ("semantic.lstm_hidden", s.lstm_hidden),
            ("style.channels", p.channels),
            ("style.scale", p.scale),
            ("style.se_dim", p.se_dim),
            ("style.attention_dim", p.attention_dim),
            ("style.embedding_dim", p.embedding_dim),
            ("decoder.prenet_dim", d.prenet_dim),
            ("decoder.attention_rnn_dim", d.attention_rnn_dim),
            ("decoder.decoder_rnn_dim", d.decoder_rnn_dim),
            ("decoder.attention_dim", d.attention_dim),
            ("decoder.location_filters", d.location_filters),
            ("decoder.location_kernel", d.location_kernel),
            ("decoder.max_len_ratio", d.max_len_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if s.kernel % 2 == 0 || p.kernel % 2 == 0 || p.first_kernel % 2 == 0 || d.location_kernel % 2 == 0 {
            return Err(Error::Config("convolution kernels must be odd".into()));
        }
        if p.channels % p.scale != 0 {
            return Err(Error::Config(format!(
                "model.style.channels ({}) must be divisible by model.style.scale ({})",
                p.channels, p.scale
            )));
        }
        if p.dilations.is_empty() || p.dilations.contains(&0) {
            return Err(Error::Config("model.style.dilations must be non-empty and positive".into()));
        }
        if !(self.mel_norm.scale > 0.0 && self.mel_norm.offset.is_finite()) {
            return Err(Error::Config("model.mel_norm.scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&s.dropout) || !(0.0..1.0).contains(&d.prenet_dropout) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
