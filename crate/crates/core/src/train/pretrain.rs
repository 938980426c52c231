//! Paralinguistic classification pretraining of the style encoder, used as its
//! initialization before reconstruction training. Starting from a classifier
//! that never needed the content keeps the embedding from carrying it.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::length_buckets;
use crate::audio::MelSpectrogram;
use crate::corpus::UtteranceRecord;
use crate::error::{Error, Result};
use crate::model::StyleTransferModel;
use crate::nn::{clip_global_norm, Adam, Graph, Linear, ParamGroup, Tensor};

/// Which labels the pretraining classifier predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainTarget {
    Speaker,
    /// One class per (speaker, emotion) cell.
    SpeakerEmotion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StylePretrainConfig {
    /// Zero disables pretraining.
    pub epochs: usize,
    pub target: PretrainTarget,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StylePretrainConfig {
    fn default() -> Self {
        Self { epochs: 20, target: PretrainTarget::SpeakerEmotion, lr: 1e-3, batch_size: 16, seed: 0 }
    }
}

impl StylePretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && (self.batch_size == 0 || !(self.lr > 0.0)) {
            return Err(Error::Config("pretrain needs a positive batch_size and lr".into()));
        }
        Ok(())
    }
}

/// Class index per record and the number of classes. Speakers are numbered
/// in sorted order.
pub fn pretrain_labels(records: &[&UtteranceRecord], target: PretrainTarget) -> (Vec<usize>, usize) {
    let speakers: Vec<&str> = records.iter().map(|r| r.speaker.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let spk = |r: &UtteranceRecord| speakers.binary_search(&r.speaker.as_str()).unwrap_or(0);
    match target {
        PretrainTarget::Speaker => (records.iter().map(|r| spk(r)).collect(), speakers.len()),
        PretrainTarget::SpeakerEmotion => (
            records.iter().map(|r| spk(r) * 4 + r.emotion.index()).collect(),
            speakers.len() * 4,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Trains the style encoder with a temporary linear classifier on top.
/// Only `style.*` parameters of `model` change.
pub fn pretrain_style(model: &mut StyleTransferModel, items: &[(usize, &MelSpectrogram)], n_classes: usize, cfg: &StylePretrainConfig) -> Result<PretrainReport> {
    if items.is_empty() || n_classes < 2 {
        return Err(Error::Data("style pretraining needs at least two classes".into()));
    }
    if let Some((l, _)) = items.iter().find(|(l, _)| *l >= n_classes) {
        return Err(Error::Data(format!("label {l} outside {n_classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = model.store.clone();
    let head = Linear::new(&mut store, "pretrain.head", ParamGroup::Head, model.style_dim(), n_classes, true, &mut rng);
    let mut adam = Adam::new(&store, 0.0);
    let m = model.cfg.n_mels;
    let lengths: Vec<usize> = items.iter().map(|(_, mel)| mel.n_frames()).collect();
    let mut report = PretrainReport { epochs: 0, final_loss: f64::NAN, train_accuracy: 0.0 };
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, idx) in length_buckets(&lengths, cfg.batch_size, &mut rng).into_iter().enumerate() {
            let t = idx.iter().map(|&i| lengths[i]).max().unwrap_or(0);
            let mut x = vec![0.0; idx.len() * t * m];
            let mut mask = vec![0.0; idx.len() * t];
            for (b, &i) in idx.iter().enumerate() {
                let v = model.normalized(items[i].1);
                x[b * t * m..b * t * m + v.len()].copy_from_slice(&v);
                mask[b * t..b * t + lengths[i]].iter_mut().for_each(|w| *w = 1.0);
            }
            let labels: Vec<usize> = idx.iter().map(|&i| items[i].0).collect();
            let (mut grads, updates) = {
                let mut g = Graph::new(&store, true, cfg.seed ^ ((epoch * 1000 + bi) as u64));
                let mel = g.constant(Tensor::new(vec![idx.len(), t, m], x)?);
                let emb = model.style_forward(&mut g, mel, &mask)?;
                let logits = head.forward(&mut g, emb)?;
                let ce = g.cross_entropy(logits, &labels)?;
                g.check_finite()?;
                let lv = g.value(logits);
                for (row, &y) in lv.data().chunks(n_classes).zip(&labels) {
                    let arg = (0..n_classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                    correct += usize::from(arg == y);
                }
                loss_sum += g.value(ce).item() * idx.len() as f64;
                (g.backward(ce), g.take_buffer_updates())
            };
            clip_global_norm(&mut grads, 1.0);
            adam.step(&mut store, &grads, |grp| match grp {
                ParamGroup::Paralinguistic | ParamGroup::Head => cfg.lr,
                _ => 0.0,
            });
            for (id, v) in updates {
                *store.get_mut(id) = v;
            }
        }
        report = PretrainReport {
            epochs: epoch + 1,
            final_loss: loss_sum / items.len() as f64,
            train_accuracy: correct as f64 / items.len() as f64,
        };
        log::info!("style pretraining epoch {} loss {:.4} accuracy {:.3}", epoch + 1, report.final_loss, report.train_accuracy);
    }
    let before: Vec<(String, Tensor)> = model
        .store
        .entries()
        .iter()
        .filter(|e| !e.name.starts_with("style."))
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect();
    model.store.load_matching(&store, "");
    debug_assert!(before.iter().all(|(n, v)| model.store.get(model.store.id(n).unwrap()) == v));
    Ok(report)
}
