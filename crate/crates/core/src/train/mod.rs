//! Reconstruction training and fine-tuning of [`StyleTransferModel`].

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};
use crate::model::{Batch, StyleTransferModel};
use crate::nn::{clip_global_norm, Adam, Graph, ParamGroup, ParamStore, Var};
use crate::quantize::UnitSequence;

mod pretrain;

pub use pretrain::{pretrain_labels, pretrain_style, PretrainReport, PretrainTarget, StylePretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub paralinguistic_lr: f64,
    pub finetune_lr: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub grad_clip: f64,
    /// Final model-sample probability of scheduled sampling.
    pub sampling_max: f64,
    /// Iterations over which the sampling probability ramps up from zero.
    pub sampling_ramp: u64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on total iterations.
    pub max_iters: Option<u64>,
    pub gate_weight: f64,
    /// Validation utterances held out for fine-tuning.
    pub val_size: usize,
    /// Fraction used when the corpus is smaller than `val_size`.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            paralinguistic_lr: 1e-4,
            finetune_lr: 1e-5,
            weight_decay: 1e-6,
            decay_factor: 0.9,
            decay_every: 5000,
            grad_clip: 1.0,
            sampling_max: 0.3,
            sampling_ramp: 50_000,
            early_stop_patience: 10,
            batch_size: 16,
            max_epochs: 1000,
            max_iters: None,
            gate_weight: 1.0,
            val_size: 1000,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("paralinguistic_lr", self.paralinguistic_lr),
            ("finetune_lr", self.finetune_lr),
            ("decay_factor", self.decay_factor),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.sampling_max) {
            return Err(Error::Config("train.weight_decay must be ≥ 0 and train.sampling_max in [0, 1]".into()));
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("train.decay_every, batch_size and max_epochs must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("train.val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrGroup {
    Main,
    Paralinguistic,
}

/// `base · decay^⌊iter / decay_every⌋`.
pub fn lr_at(iter: u64, cfg: &TrainConfig, group: LrGroup) -> f64 {
    let base = match group {
        LrGroup::Main => cfg.base_lr,
        LrGroup::Paralinguistic => cfg.paralinguistic_lr,
    };
    base * cfg.decay_factor.powi((iter / cfg.decay_every) as i32)
}

/// Linear ramp from 0 to `sampling_max` over `sampling_ramp` iterations.
pub fn sampling_prob(iter: u64, cfg: &TrainConfig) -> f64 {
    if cfg.sampling_ramp == 0 {
        return cfg.sampling_max;
    }
    cfg.sampling_max * (iter as f64 / cfg.sampling_ramp as f64).min(1.0)
}

/// Mean squared difference of two equal-shape spectrograms.
pub fn mel_mse(pred: &MelSpectrogram, target: &MelSpectrogram) -> Result<f64> {
    if pred.n_frames() != target.n_frames() || pred.n_mels() != target.n_mels() {
        return Err(Error::Contract(format!(
            "reconstruction shapes differ: {}x{} vs {}x{}",
            pred.n_frames(),
            pred.n_mels(),
            target.n_frames(),
            target.n_mels()
        )));
    }
    let n = pred.data().len().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

pub struct LossTerms {
    pub total: Var,
    pub mse: f64,
    pub gate: f64,
}

/// Masked frame MSE plus weighted stop-token BCE.
pub fn reconstruction_loss(g: &mut Graph, mel: Var, gate: Var, batch: &Batch, gate_weight: f64, pos_weight: f64) -> Result<LossTerms> {
    let mse = g.mse_masked(mel, &batch.mel, Some(&batch.frame_mask))?;
    let bce = g.bce_logits(gate, &batch.gate_target(), Some(&batch.frame_mask), pos_weight)?;
    let total = g.combine(&[(mse, 1.0), (bce, gate_weight)])?;
    Ok(LossTerms { mse: g.value(mse).item(), gate: g.value(bce).item(), total })
}

/// One training utterance: deduplicated units and their target mel.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub utt_id: String,
    pub units: UnitSequence,
    pub mel: MelSpectrogram,
}

/// Index chunks of similar target length, in shuffled order.
pub fn length_buckets(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| lengths[i]);
    let mut chunks: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    chunks.shuffle(rng);
    chunks
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub epoch: usize,
    pub lr_main: f64,
    pub lr_paralinguistic: f64,
    pub best_val: Option<f64>,
    pub patience: usize,
    pub sample_prob: f64,
    pub finetune: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mse: f64,
    pub gate: f64,
    pub grad_norm: f64,
}

/// Row of the training-curve log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub state: TrainState,
    pub stop: StopReason,
    pub log: Vec<LogRow>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: StyleTransferModel,
    pub state: TrainState,
    pub log: Vec<LogRow>,
    adam: Adam,
    rng: ChaCha8Rng,
    best: Option<ParamStore>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: StyleTransferModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(&model.store, cfg.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut t = Self {
            cfg,
            model,
            state: TrainState::default(),
            log: Vec::new(),
            adam,
            rng,
            best: None,
            checkpoint_dir: None,
        };
        t.refresh_state();
        Ok(t)
    }

    /// Same loop with one flat rate for every group.
    pub fn finetuning(model: StyleTransferModel, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(model, cfg)?;
        t.state.finetune = true;
        t.refresh_state();
        Ok(t)
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        if self.state.finetune {
            return match group {
                ParamGroup::Buffer => 0.0,
                _ => self.cfg.finetune_lr,
            };
        }
        match group {
            ParamGroup::Main => lr_at(self.state.iteration, &self.cfg, LrGroup::Main),
            ParamGroup::Paralinguistic => lr_at(self.state.iteration, &self.cfg, LrGroup::Paralinguistic),
            _ => 0.0,
        }
    }

    fn refresh_state(&mut self) {
        self.state.lr_main = self.lr(ParamGroup::Main);
        self.state.lr_paralinguistic = self.lr(ParamGroup::Paralinguistic);
        self.state.sample_prob = sampling_prob(self.state.iteration, &self.cfg);
    }

    /// One optimizer update on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepStats> {
        let seed = self.cfg.seed ^ self.state.iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let sample_prob = sampling_prob(self.state.iteration, &self.cfg);
        let pos_weight = self.model.cfg.decoder.gate_pos_weight;
        let (stats, mut grads, updates) = {
            let mut g = Graph::new(&self.model.store, true, seed);
            let out = self.model.forward_batch(&mut g, batch, sample_prob)?;
            let loss = reconstruction_loss(&mut g, out.mel, out.gate, batch, self.cfg.gate_weight, pos_weight)?;
            let value = g.value(loss.total).item();
            if !value.is_finite() || g.nonfinite().is_some() {
                let op = g.nonfinite().unwrap_or("loss");
                self.save_last_good()?;
                return Err(Error::Divergence(format!(
                    "non-finite value from {op} at iteration {}",
                    self.state.iteration
                )));
            }
            let grads = g.backward(loss.total);
            let stats = StepStats { loss: value, mse: loss.mse, gate: loss.gate, grad_norm: 0.0 };
            (stats, grads, g.take_buffer_updates())
        };
        let norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
        if !norm.is_finite() {
            self.save_last_good()?;
            return Err(Error::Divergence(format!("non-finite gradient at iteration {}", self.state.iteration)));
        }
        let lrs = [self.lr(ParamGroup::Main), self.lr(ParamGroup::Paralinguistic), self.cfg.finetune_lr];
        let finetune = self.state.finetune;
        self.adam.step(&mut self.model.store, &grads, |grp| match (finetune, grp) {
            (_, ParamGroup::Buffer) => 0.0,
            (true, _) => lrs[2],
            (false, ParamGroup::Main) => lrs[0],
            (false, ParamGroup::Paralinguistic) => lrs[1],
            _ => 0.0,
        });
        for (id, t) in updates {
            *self.model.store.get_mut(id) = t;
        }
        self.state.iteration += 1;
        self.refresh_state();
        Ok(StepStats { grad_norm: norm, ..stats })
    }

    fn save_last_good(&self) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            self.model.save(&dir.join("last_good.ckpt"), serde_json::to_value(&self.state)?)?;
        }
        Ok(())
    }

    /// Teacher-forced validation loss, averaged over batches weighted by size.
    pub fn validate(&self, data: &[TrainItem]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("empty validation set".into()));
        }
        let pos_weight = self.model.cfg.decoder.gate_pos_weight;
        let lengths: Vec<usize> = data.iter().map(|d| d.mel.n_frames()).collect();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by_key(|&i| lengths[i]);
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let items: Vec<_> = chunk.iter().map(|&i| (&data[i].units, &data[i].mel)).collect();
            let batch = self.model.batch(&items)?;
            let mut g = Graph::inference(&self.model.store, self.cfg.seed);
            let out = self.model.forward_batch(&mut g, &batch, 0.0)?;
            let loss = reconstruction_loss(&mut g, out.mel, out.gate, &batch, self.cfg.gate_weight, pos_weight)?;
            total += g.value(loss.total).item() * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// One pass over `data` in length-bucketed batches. Returns the mean loss.
    pub fn train_epoch(&mut self, data: &[TrainItem]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let lengths: Vec<usize> = data.iter().map(|d| d.mel.n_frames()).collect();
        let buckets = length_buckets(&lengths, self.cfg.batch_size, &mut self.rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in buckets {
            if self.cfg.max_iters.is_some_and(|m| self.state.iteration >= m) {
                break;
            }
            let items: Vec<_> = chunk.iter().map(|&i| (&data[i].units, &data[i].mel)).collect();
            let batch = self.model.batch(&items)?;
            sum += self.step(&batch)?.loss;
            n += 1;
        }
        self.state.epoch += 1;
        Ok(if n > 0 { sum / n as f64 } else { f64::NAN })
    }

    /// Trains until validation loss stops improving for `early_stop_patience`
    /// epochs, then restores the best parameters seen.
    pub fn fit(&mut self, train: &[TrainItem], val: &[TrainItem], mut on_epoch: impl FnMut(&TrainState, f64, f64)) -> Result<FitReport> {
        let stop = loop {
            if self.state.epoch >= self.cfg.max_epochs {
                break StopReason::MaxEpochs;
            }
            if self.cfg.max_iters.is_some_and(|m| self.state.iteration >= m) {
                break StopReason::MaxIters;
            }
            let train_loss = self.train_epoch(train)?;
            let val_loss = self.validate(val)?;
            self.log.push(LogRow {
                iteration: self.state.iteration,
                train_loss,
                val_loss: Some(val_loss),
                lr: self.state.lr_main,
            });
            if self.state.best_val.map_or(true, |b| val_loss < b) {
                self.state.best_val = Some(val_loss);
                self.state.patience = 0;
                self.best = Some(self.model.store.clone());
                if let Some(dir) = &self.checkpoint_dir {
                    self.model.save(&dir.join("best.ckpt"), serde_json::to_value(&self.state)?)?;
                }
            } else {
                self.state.patience += 1;
            }
            if let Some(dir) = &self.checkpoint_dir {
                self.model.save(&dir.join("last.ckpt"), serde_json::to_value(&self.state)?)?;
                write_log(&dir.join("train_log.csv"), &self.log)?;
            }
            on_epoch(&self.state, train_loss, val_loss);
            if self.state.patience >= self.cfg.early_stop_patience {
                break StopReason::EarlyStop;
            }
        };
        if let Some(best) = self.best.take() {
            self.model.store = best;
        }
        Ok(FitReport { state: self.state.clone(), stop, log: self.log.clone() })
    }

    pub fn into_model(self) -> StyleTransferModel {
        self.model
    }
}

/// Splits off a validation set of `val_size` utterances, or `val_fraction` of
/// the corpus when it is smaller than that. The second value reports whether
/// the fallback was used.
pub fn split_validation<T: Clone>(items: &[T], val_size: usize, val_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>, bool) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fallback = items.len() <= val_size;
    let n_val = if fallback {
        ((items.len() as f64 * val_fraction).round() as usize).clamp(1.min(items.len()), items.len().saturating_sub(1))
    } else {
        val_size
    };
    let val = idx[..n_val].iter().map(|&i| items[i].clone()).collect();
    let train = idx[n_val..].iter().map(|&i| items[i].clone()).collect();
    (train, val, fallback)
}

/// Fine-tunes a pretrained model at the flat fine-tuning rate with a held-out
/// validation split.
pub fn finetune(model: StyleTransferModel, data: &[TrainItem], cfg: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<(StyleTransferModel, FitReport)> {
    let (train, val, fallback) = split_validation(data, cfg.val_size, cfg.val_fraction, cfg.seed);
    if fallback {
        log::warn!(
            "corpus of {} utterances is not larger than the validation size {}; holding out {} instead",
            data.len(),
            cfg.val_size,
            val.len()
        );
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("fine-tuning needs at least two utterances".into()));
    }
    let mut t = Trainer::finetuning(model, cfg.clone())?;
    t.checkpoint_dir = checkpoint_dir.map(Path::to_path_buf);
    let report = t.fit(&train, &val, |_, _, _| {})?;
    Ok((t.into_model(), report))
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut s = String::from("iter,train_loss,val_loss,lr\n");
    for r in rows {
        let val = r.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{:.6},{},{:e}\n", r.iteration, r.train_loss, val, r.lr));
    }
    crate::io::write_atomic(path, s.as_bytes())
}

/// Appends one line to a CSV step log, writing the header on creation.
pub fn append_step_log(path: &Path, iteration: u64, s: &StepStats, lr: f64) -> Result<()> {
    let new = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut line = String::new();
    if new {
        line.push_str("iter,loss,mse,gate,grad_norm,lr\n");
    }
    line.push_str(&format!("{iteration},{:.6},{:.6},{:.6},{:.6},{lr:e}\n", s.loss, s.mse, s.gate, s.grad_norm));
    f.write_all(line.as_bytes()).map_err(|e| Error::Io { path: path.into(), source: e })
}

/// One padded batch holding every item.
pub fn batch_of(model: &StyleTransferModel, items: &[TrainItem]) -> Result<Batch> {
    let refs: Vec<_> = items.iter().map(|d| (&d.units, &d.mel)).collect();
    model.batch(&refs)
}
