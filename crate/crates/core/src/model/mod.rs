//! The style-transfer network: a semantic encoder over deduplicated units, a
//! paralinguistic (style) encoder over mel frames and an attention decoder
//! that reconstructs mel frames from both.

mod config;
mod decoder;
mod semantic;
mod style;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{DecoderConfig, MelNorm, ModelConfig, SemanticConfig, StyleConfig};
pub use decoder::{Decoder, DecoderState, FreeRunning, LocationAttention, PreparedMemory, StepOutput, TeacherForced};
pub use semantic::SemanticEncoder;
pub use style::{SeRes2Block, StyleEncoder};

use crate::audio::{DspConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::quantize::UnitSequence;

/// `L × 2H` contextual unit encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEncoding {
    pub matrix: Tensor,
    pub source_units: UnitSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleEmbedding {
    pub vector: Vec<f64>,
    #[serde(default)]
    pub source: String,
}

/// Decoded mel frames with attention alignments.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub mel: MelSpectrogram,
    /// `n_frames × L` row-major.
    pub alignments: Vec<f64>,
    pub memory_len: usize,
    pub truncated: bool,
}

pub enum DecodeMode<'a> {
    TeacherForced(&'a MelSpectrogram),
    FreeRunning { max_frames: Option<usize> },
}

/// Zero-padded batch of (units, mel) pairs with mel values normalized.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub unit_mask: Vec<f64>,
    pub max_units: usize,
    /// `[B, T, M]`.
    pub mel: Tensor,
    pub frame_mask: Vec<f64>,
    pub frame_lens: Vec<usize>,
}

impl Batch {
    pub fn new(items: &[(&UnitSequence, &MelSpectrogram)], norm: MelNorm) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let m = items[0].1.n_mels();
        let lmax = items.iter().map(|(u, _)| u.len()).max().unwrap_or(0);
        let tmax = items.iter().map(|(_, x)| x.n_frames()).max().unwrap_or(0);
        let b = items.len();
        let mut ids = vec![0; b * lmax];
        let mut unit_mask = vec![0.0; b * lmax];
        let mut mel = vec![0.0; b * tmax * m];
        let mut frame_mask = vec![0.0; b * tmax];
        let mut frame_lens = Vec::with_capacity(b);
        for (bi, (u, x)) in items.iter().enumerate() {
            check_units(u)?;
            if x.n_mels() != m {
                return Err(Error::Shape { op: "batch mel", lhs: vec![x.n_mels()], rhs: vec![m] });
            }
            if x.n_frames() == 0 {
                return Err(Error::Length("mel target has no frames".into()));
            }
            for (j, &id) in u.units.iter().enumerate() {
                ids[bi * lmax + j] = id as usize;
                unit_mask[bi * lmax + j] = 1.0;
            }
            let dst = &mut mel[bi * tmax * m..bi * tmax * m + x.data().len()];
            dst.iter_mut().zip(x.data()).for_each(|(d, v)| *d = norm.forward(*v));
            frame_mask[bi * tmax..bi * tmax + x.n_frames()].iter_mut().for_each(|v| *v = 1.0);
            frame_lens.push(x.n_frames());
        }
        Ok(Self {
            ids,
            unit_mask,
            max_units: lmax,
            mel: Tensor::new(vec![b, tmax, m], mel)?,
            frame_mask,
            frame_lens,
        })
    }

    pub fn size(&self) -> usize {
        self.frame_lens.len()
    }

    pub fn max_frames(&self) -> usize {
        self.mel.dim(1)
    }

    /// Stop targets: 1 on each row's final valid frame.
    pub fn gate_target(&self) -> Vec<f64> {
        let t = self.max_frames();
        let mut out = vec![0.0; self.size() * t];
        for (bi, &n) in self.frame_lens.iter().enumerate() {
            out[bi * t + n - 1] = 1.0;
        }
        out
    }
}

fn check_units(u: &UnitSequence) -> Result<()> {
    if !u.deduped {
        return Err(Error::Contract("semantic encoder requires deduplicated units".into()));
    }
    if u.is_empty() {
        return Err(Error::Length("unit sequence is empty".into()));
    }
    if u.units.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Contract("deduplicated units contain adjacent repeats".into()));
    }
    Ok(())
}

/// Outputs of a teacher-forced batch pass.
pub struct BatchOutput {
    pub mel: Var,
    pub gate: Var,
    pub alignments: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct StyleTransferModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub semantic: SemanticEncoder,
    pub style: StyleEncoder,
    pub decoder: Decoder,
}

impl StyleTransferModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let semantic = SemanticEncoder::new(&mut store, &cfg.semantic, cfg.vocab, &mut rng);
        let style = StyleEncoder::new(&mut store, &cfg.style, cfg.n_mels, &mut rng);
        let decoder = Decoder::new(&mut store, &cfg.decoder, cfg.n_mels, cfg.memory_dim(), &mut rng);
        Ok(Self { cfg, store, semantic, style, decoder })
    }

    /// Rebuilds the architecture from `cfg` and takes parameter values from
    /// `store`, which must match it exactly.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        let loaded = m.store.load_matching(&store, "");
        if loaded.len() != m.store.len() || store.len() != m.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} of {} expected parameters",
                loaded.len(),
                m.store.len()
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "model": self.cfg, "extra": extra });
        self.store.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::load(path)?;
        let cfg: ModelConfig = serde_json::from_value(meta.get("model").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("{}: bad model config: {e}", path.display())))?;
        let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((Self::from_store(cfg, store)?, extra))
    }

    pub fn normalized(&self, mel: &MelSpectrogram) -> Vec<f64> {
        let n = self.cfg.mel_norm;
        mel.data().iter().map(|&v| n.forward(v)).collect()
    }

    pub fn batch(&self, items: &[(&UnitSequence, &MelSpectrogram)]) -> Result<Batch> {
        Batch::new(items, self.cfg.mel_norm)
    }

    pub fn memory_dim(&self) -> usize {
        self.cfg.memory_dim()
    }

    pub fn style_dim(&self) -> usize {
        self.cfg.style.embedding_dim
    }

    fn check_vocab(&self, u: &UnitSequence) -> Result<()> {
        check_units(u)?;
        u.validate(self.cfg.vocab)
    }

    fn check_mel(&self, mel: &MelSpectrogram) -> Result<()> {
        if mel.n_mels() != self.cfg.n_mels {
            return Err(Error::Config(format!(
                "mel has {} bins, model expects {}",
                mel.n_mels(),
                self.cfg.n_mels
            )));
        }
        if mel.n_frames() < 2 {
            return Err(Error::Length(format!(
                "style encoder needs at least 2 frames, got {}",
                mel.n_frames()
            )));
        }
        Ok(())
    }

    /// Semantic encodings `[B, L, 2H]` for padded unit ids.
    pub fn semantic_forward(&self, g: &mut Graph, ids: &[usize], batch: usize, len: usize, mask: &[f64]) -> Result<Var> {
        self.semantic.forward(g, ids, batch, len, mask)
    }

    /// Style vectors `[B, D]` for padded mel frames `[B, T, M]`.
    pub fn style_forward(&self, g: &mut Graph, mel: Var, mask: &[f64]) -> Result<Var> {
        self.style.forward(g, mel, mask)
    }

    /// Appends the style vector to every memory row: `[B, L, 2H + D]`.
    pub fn condition(&self, g: &mut Graph, sem: Var, style: Var) -> Result<Var> {
        let s = g.shape(sem).to_vec();
        let d = g.shape(style).to_vec();
        if s.len() != 3 || d.len() != 2 || s[0] != d[0] {
            return Err(Error::Shape { op: "condition", lhs: s, rhs: d });
        }
        let zeros = g.constant(Tensor::zeros(vec![s[0], s[1], d[1]]));
        let tiled = g.add_rows(zeros, style)?;
        g.concat_last(&[sem, tiled])
    }

    /// Teacher-forced reconstruction where each row's style comes from its own
    /// target mel.
    pub fn forward_batch(&self, g: &mut Graph, batch: &Batch, sample_prob: f64) -> Result<BatchOutput> {
        let b = batch.size();
        let sem = self.semantic_forward(g, &batch.ids, b, batch.max_units, &batch.unit_mask)?;
        let mel_in = g.constant(batch.mel.clone());
        let style = self.style_forward(g, mel_in, &batch.frame_mask)?;
        let memory = self.condition(g, sem, style)?;
        let mem = self.decoder.prepare(g, memory, batch.unit_mask.clone())?;
        let out = self.decoder.teacher_forced(g, &mem, &batch.mel, sample_prob)?;
        Ok(BatchOutput { mel: out.mel, gate: out.gate, alignments: out.alignments })
    }

    /// Eval-mode semantic encoding of one sequence.
    pub fn encode_semantic(&self, u: &UnitSequence) -> Result<SemanticEncoding> {
        self.check_vocab(u)?;
        let mut g = Graph::inference(&self.store, 0);
        let ids: Vec<usize> = u.units.iter().map(|&v| v as usize).collect();
        let mask = vec![1.0; ids.len()];
        let v = self.semantic_forward(&mut g, &ids, 1, ids.len(), &mask)?;
        g.check_finite()?;
        let h = g.value(v).clone().reshaped(vec![ids.len(), self.semantic.out_dim])?;
        Ok(SemanticEncoding { matrix: h, source_units: u.clone() })
    }

    /// Eval-mode style embedding of one spectrogram.
    pub fn encode_style(&self, mel: &MelSpectrogram, source: &str) -> Result<StyleEmbedding> {
        self.check_mel(mel)?;
        let mut g = Graph::inference(&self.store, 0);
        let x = g.constant(Tensor::new(vec![1, mel.n_frames(), mel.n_mels()], self.normalized(mel))?);
        let mask = vec![1.0; mel.n_frames()];
        let v = self.style_forward(&mut g, x, &mask)?;
        g.check_finite()?;
        Ok(StyleEmbedding { vector: g.value(v).data().to_vec(), source: source.into() })
    }

    /// Decodes `units` in the style given by `style`. Dropout stays active in
    /// the prenet, so `seed` fixes the output.
    pub fn decode_sequence(&self, u: &UnitSequence, style: &StyleEmbedding, mode: DecodeMode<'_>, dsp: &DspConfig, seed: u64) -> Result<Decoded> {
        self.check_vocab(u)?;
        if style.vector.len() != self.style_dim() {
            return Err(Error::Shape { op: "style embedding", lhs: vec![style.vector.len()], rhs: vec![self.style_dim()] });
        }
        let l = u.len();
        let mut g = Graph::inference(&self.store, seed);
        let ids: Vec<usize> = u.units.iter().map(|&v| v as usize).collect();
        let mask = vec![1.0; l];
        let sem = self.semantic_forward(&mut g, &ids, 1, l, &mask)?;
        let sv = g.constant(Tensor::new(vec![1, style.vector.len()], style.vector.clone())?);
        let memory = self.condition(&mut g, sem, sv)?;
        let mem = self.decoder.prepare(&mut g, memory, mask)?;
        let m = self.cfg.n_mels;
        let (frames, alignments, truncated) = match mode {
            DecodeMode::TeacherForced(target) => {
                if target.n_mels() != m {
                    return Err(Error::Config(format!("target has {} bins, model expects {m}", target.n_mels())));
                }
                let t = Tensor::new(vec![1, target.n_frames(), m], self.normalized(target))?;
                let out = self.decoder.teacher_forced(&mut g, &mem, &t, 0.0)?;
                g.check_finite()?;
                let mut al = Vec::with_capacity(out.alignments.len() * l);
                for a in &out.alignments {
                    al.extend_from_slice(g.value(*a).data());
                }
                (g.value(out.mel).data().to_vec(), al, false)
            }
            DecodeMode::FreeRunning { max_frames } => {
                let cap = max_frames.unwrap_or(self.cfg.decoder.max_len_ratio * l).max(1);
                let out = self.decoder.free_running(&mut g, &mem, cap)?;
                (out.frames, out.alignments, out.truncated)
            }
        };
        let norm = self.cfg.mel_norm;
        let frames = frames.into_iter().map(|v| norm.inverse(v)).collect();
        Ok(Decoded { mel: MelSpectrogram::from_frames(frames, m, dsp)?, alignments, memory_len: l, truncated })
    }
}
