//! Speech emotion recognition harness: session folds, a pooled-feature
//! classifier with separate backbone and head rates, and WA/UA reporting.

mod metrics;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{direct_scores, ConfusionMatrix, Scores, N_CLASSES};

use crate::corpus::{Emotion, UtteranceRecord};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::par::par_map;
use crate::nn::{Adam, Graph, Linear, ParamGroup, ParamStore, Tensor};
use crate::quantize::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub test: u32,
    pub validation: u32,
    pub train: Vec<u32>,
}

/// Fold `i` tests session `i`, validates on the next one and trains on the rest.
pub fn make_folds(sessions: &[u32]) -> Result<Vec<FoldSpec>> {
    let mut s = sessions.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != 5 || sessions.len() != 5 {
        return Err(Error::Config(format!("need exactly 5 distinct sessions, got {sessions:?}")));
    }
    Ok((0..5)
        .map(|i| FoldSpec {
            test: s[i],
            validation: s[(i + 1) % 5],
            train: (0..5).filter(|&j| j != i && j != (i + 1) % 5).map(|j| s[j]).collect(),
        })
        .collect())
}

/// One labelled utterance with its frame features.
#[derive(Debug, Clone)]
pub struct SerItem {
    pub utt_id: String,
    pub emotion: Emotion,
    pub session: u32,
    /// For generated rows: the utterances they were derived from.
    pub derived_from: Vec<String>,
    pub features: FeatureMatrix,
}

impl SerItem {
    /// `source:` and `ref:` tags mark a generated row's origins.
    pub fn from_record(rec: &UtteranceRecord, features: FeatureMatrix) -> Self {
        let derived_from = rec
            .tags
            .iter()
            .filter_map(|t| t.strip_prefix("source:").or_else(|| t.strip_prefix("ref:")))
            .map(str::to_string)
            .collect();
        Self {
            utt_id: rec.utt_id.clone(),
            emotion: rec.emotion,
            session: rec.session,
            derived_from,
            features,
        }
    }
}

/// Keeps generated rows whose every origin lies in the fold's training
/// sessions. Returns the kept rows and the ids of dropped ones.
pub fn leakage_guard<'a>(aug: &'a [SerItem], fold: &FoldSpec, session_of: &HashMap<String, u32>) -> (Vec<&'a SerItem>, Vec<String>) {
    let train: HashSet<u32> = fold.train.iter().copied().collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for a in aug {
        let ok = !a.derived_from.is_empty()
            && a.derived_from.iter().all(|id| session_of.get(id).is_some_and(|s| train.contains(s)));
        if ok {
            kept.push(a);
        } else {
            dropped.push(a.utt_id.clone());
        }
    }
    if !dropped.is_empty() {
        log::warn!("fold test {}: dropped {} generated rows with origins outside the training sessions", fold.test, dropped.len());
    }
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    /// Pooled input features feed the head directly.
    Frozen,
    /// A per-frame dense layer with ReLU, trained at the backbone rate.
    Trainable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SerConfig {
    pub backbone: BackboneMode,
    pub hidden: usize,
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for SerConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneMode::Trainable,
            hidden: 128,
            backbone_lr: 1e-5,
            head_lr: 1e-4,
            weight_decay: 0.0,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

impl SerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.backbone_lr > 0.0 && self.head_lr > 0.0) {
            return Err(Error::Config("ser learning rates must be positive".into()));
        }
        if self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("ser.hidden, batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Per-dimension standardization fitted on training frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(items: &[&SerItem]) -> Result<Self> {
        let dim = items.first().ok_or_else(|| Error::Data("no training items".into()))?.features.dim();
        let mut mean = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0.0;
        for it in items {
            for f in it.features.frames() {
                for d in 0..dim {
                    mean[d] += f[d];
                    sq[d] += f[d] * f[d];
                }
                n += 1.0;
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
        Ok(Self { mean, std })
    }

    fn apply(&self, f: &FeatureMatrix) -> Vec<f64> {
        let d = self.mean.len();
        f.data().iter().enumerate().map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d]).collect()
    }
}

/// Mean-pooled frame features, optionally through a trainable frame layer,
/// followed by one dense layer to the class logits.
#[derive(Debug, Clone)]
pub struct SerClassifier {
    pub cfg: SerConfig,
    pub store: ParamStore,
    pub backbone: Option<Linear>,
    pub head: Linear,
    pub norm: Standardizer,
}

impl SerClassifier {
    pub fn new(cfg: SerConfig, dim: usize, norm: Standardizer) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (backbone, head_in) = match cfg.backbone {
            BackboneMode::Frozen => (None, dim),
            BackboneMode::Trainable => (Some(Linear::new(&mut store, "ser.backbone", ParamGroup::Backbone, dim, cfg.hidden, true, &mut rng)), cfg.hidden),
        };
        let head = Linear::new(&mut store, "ser.head", ParamGroup::Head, head_in, N_CLASSES, true, &mut rng);
        Ok(Self { cfg, store, backbone, head, norm })
    }

    fn logits(&self, g: &mut Graph, items: &[&SerItem]) -> Result<crate::nn::Var> {
        let b = items.len();
        let tmax = items.iter().map(|i| i.features.n_frames()).max().unwrap_or(0);
        let d = self.norm.mean.len();
        let mut x = vec![0.0; b * tmax * d];
        let mut mask = vec![0.0; b * tmax];
        for (bi, it) in items.iter().enumerate() {
            let f = self.norm.apply(&it.features);
            x[bi * tmax * d..bi * tmax * d + f.len()].copy_from_slice(&f);
            mask[bi * tmax..bi * tmax + it.features.n_frames()].iter_mut().for_each(|v| *v = 1.0);
        }
        let mut h = g.constant(Tensor::new(vec![b, tmax, d], x)?);
        if let Some(bb) = &self.backbone {
            h = bb.forward(g, h)?;
            h = g.relu(h);
        }
        let pooled = g.mean_time(h, Some(&mask))?;
        self.head.forward(g, pooled)
    }

    pub fn predict(&self, items: &[&SerItem]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(64) {
            let mut g = Graph::inference(&self.store, 0);
            let l = self.logits(&mut g, chunk)?;
            for row in g.value(l).data().chunks(N_CLASSES) {
                let mut best = 0;
                for c in 1..N_CLASSES {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn loss(&self, items: &[&SerItem]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in items.chunks(64) {
            let mut g = Graph::inference(&self.store, 0);
            let l = self.logits(&mut g, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|i| i.emotion.index()).collect();
            let ce = g.cross_entropy(l, &labels)?;
            total += g.value(ce).item() * chunk.len() as f64;
        }
        Ok(total / items.len().max(1) as f64)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "ser": self.cfg,
            "norm": self.norm,
            "dim": self.norm.mean.len(),
            "extra": extra,
        });
        self.store.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::load(path)?;
        let bad = |what: &str| Error::Format(format!("{}: bad classifier {what}", path.display()));
        let cfg: SerConfig = serde_json::from_value(meta["ser"].clone()).map_err(|_| bad("config"))?;
        let norm: Standardizer = serde_json::from_value(meta["norm"].clone()).map_err(|_| bad("normalizer"))?;
        let mut clf = Self::new(cfg, norm.mean.len(), norm)?;
        let loaded = clf.store.load_matching(&store, "");
        if loaded.len() != clf.store.len() {
            return Err(bad("parameters"));
        }
        Ok((clf, meta["extra"].clone()))
    }

    fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.cfg.backbone_lr,
            ParamGroup::Head => self.cfg.head_lr,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_val_loss: f64,
    pub n_train: usize,
}

/// Trains on `train` with early stopping on `val` cross-entropy; the best
/// parameters are kept.
pub fn train_classifier(train: &[&SerItem], val: &[&SerItem], cfg: &SerConfig) -> Result<(SerClassifier, TrainSummary)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("ser training needs non-empty train and validation splits".into()));
    }
    let norm = Standardizer::fit(train)?;
    let mut clf = SerClassifier::new(cfg.clone(), train[0].features.dim(), norm)?;
    let mut adam = Adam::new(&clf.store, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, clf.store.clone());
    let mut since = 0;
    let mut epochs = 0;
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&SerItem> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = items.iter().map(|i| i.emotion.index()).collect();
            let grads = {
                let mut g = Graph::new(&clf.store, true, 0);
                let l = clf.logits(&mut g, &items)?;
                let ce = g.cross_entropy(l, &labels)?;
                g.check_finite()?;
                g.backward(ce)
            };
            let lrs = (clf.lr(ParamGroup::Backbone), clf.lr(ParamGroup::Head));
            adam.step(&mut clf.store, &grads, |grp| match grp {
                ParamGroup::Backbone => lrs.0,
                ParamGroup::Head => lrs.1,
                _ => 0.0,
            });
        }
        epochs += 1;
        let v = clf.loss(val)?;
        if v < best.0 {
            best = (v, clf.store.clone());
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    clf.store = best.1;
    Ok((clf, TrainSummary { epochs, best_val_loss: best.0, n_train: train.len() }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub scores: Scores,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(clf: &SerClassifier, test: &[&SerItem]) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::Data("empty test split".into()));
    }
    let pred = clf.predict(test)?;
    let truth: Vec<usize> = test.iter().map(|i| i.emotion.index()).collect();
    let confusion = ConfusionMatrix::from_predictions(&truth, &pred)?;
    if confusion.scores()?.missing_classes {
        log::warn!("test split lacks some classes; UA averages the present ones");
    }
    Ok(EvalResult { scores: confusion.scores()?, confusion })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: FoldSpec,
    pub eval: EvalResult,
    pub n_train: usize,
    pub n_aug: usize,
    pub dropped_aug: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_wa: f64,
    pub mean_ua: f64,
    pub confusion: ConfusionMatrix,
}

impl CvReport {
    pub fn from_folds(folds: Vec<FoldResult>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Data("no completed folds".into()));
        }
        let n = folds.len() as f64;
        let mut confusion = ConfusionMatrix::default();
        for f in &folds {
            confusion.add(&f.eval.confusion);
        }
        Ok(Self {
            mean_wa: folds.iter().map(|f| f.eval.scores.wa).sum::<f64>() / n,
            mean_ua: folds.iter().map(|f| f.eval.scores.ua).sum::<f64>() / n,
            confusion,
            folds,
        })
    }
}

/// A classifier trained for one fold.
#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub fold: FoldSpec,
    pub classifier: SerClassifier,
    pub n_train: usize,
    pub n_aug: usize,
    pub dropped_aug: usize,
    pub epochs: usize,
}

fn session_list(items: &[SerItem]) -> Vec<u32> {
    let mut s: Vec<u32> = items.iter().map(|i| i.session).collect();
    s.sort_unstable();
    s.dedup();
    s
}

/// Trains one classifier per leave-one-session-out fold. Generated rows join
/// the training split only, after the leakage guard.
pub fn train_folds(items: &[SerItem], aug: &[SerItem], cfg: &SerConfig, workers: usize) -> Result<Vec<TrainedFold>> {
    let folds = make_folds(&session_list(items))?;
    let session_of: HashMap<String, u32> = items.iter().map(|i| (i.utt_id.clone(), i.session)).collect();
    par_map(folds.len(), workers, |i| {
        let fold = &folds[i];
        let mut train: Vec<&SerItem> = items.iter().filter(|it| fold.train.contains(&it.session)).collect();
        let val: Vec<&SerItem> = items.iter().filter(|it| it.session == fold.validation).collect();
        let (kept, dropped) = leakage_guard(aug, fold, &session_of);
        let n_aug = kept.len();
        train.extend(kept);
        let (classifier, summary) = train_classifier(&train, &val, cfg)?;
        Ok(TrainedFold {
            fold: fold.clone(),
            classifier,
            n_train: train.len(),
            n_aug,
            dropped_aug: dropped.len(),
            epochs: summary.epochs,
        })
    })
}

/// Scores every fold's classifier on its held-out session.
pub fn evaluate_folds(items: &[SerItem], trained: &[TrainedFold]) -> Result<CvReport> {
    let folds = trained
        .iter()
        .map(|t| {
            let test: Vec<&SerItem> = items.iter().filter(|i| i.session == t.fold.test).collect();
            Ok(FoldResult {
                fold: t.fold.clone(),
                eval: evaluate(&t.classifier, &test)?,
                n_train: t.n_train,
                n_aug: t.n_aug,
                dropped_aug: t.dropped_aug,
                epochs: t.epochs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CvReport::from_folds(folds)
}

/// Leave-one-session-out cross-validation: `train_folds` then `evaluate_folds`.
pub fn cross_validate(items: &[SerItem], aug: &[SerItem], cfg: &SerConfig, workers: usize) -> Result<CvReport> {
    let trained = train_folds(items, aug, cfg, workers)?;
    evaluate_folds(items, &trained)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallDelta {
    pub class: Emotion,
    pub baseline: Option<f64>,
    pub augmented: Option<f64>,
    pub delta: Option<f64>,
}

/// Per-class recall of the aggregate confusion matrices, compared.
pub fn recall_deltas(baseline: &CvReport, augmented: &CvReport) -> Vec<RecallDelta> {
    Emotion::ALL
        .iter()
        .map(|&e| {
            let b = baseline.confusion.recall(e.index());
            let a = augmented.confusion.recall(e.index());
            RecallDelta { class: e, baseline: b, augmented: a, delta: a.zip(b).map(|(a, b)| a - b) }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Writes `folds.csv`, `confusion.csv`, `confusion.png`, `report.json` and,
/// with a baseline, `recall_deltas.csv` into `dir`.
pub fn write_report(dir: &Path, report: &CvReport, baseline: Option<&CvReport>, meta: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("fold,test_session,val_session,wa,ua,n_train,n_aug,dropped_aug\n");
    for (i, f) in report.folds.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{:.4},{:.4},{},{},{}\n",
            i + 1,
            f.fold.test,
            f.fold.validation,
            f.eval.scores.wa,
            f.eval.scores.ua,
            f.n_train,
            f.n_aug,
            f.dropped_aug
        ));
    }
    csv.push_str(&format!("mean,,,{:.4},{:.4},,,\n", report.mean_wa, report.mean_ua));
    write_atomic(&dir.join("folds.csv"), csv.as_bytes())?;
    write_atomic(&dir.join("confusion.csv"), report.confusion.to_csv().as_bytes())?;
    report.confusion.write_png(&dir.join("confusion.png"))?;
    let deltas = baseline.map(|b| recall_deltas(b, report));
    if let Some(d) = &deltas {
        let mut s = String::from("class,baseline_recall,augmented_recall,delta\n");
        for r in d {
            s.push_str(&format!("{},{},{},{}\n", r.class, opt(r.baseline), opt(r.augmented), opt(r.delta)));
        }
        write_atomic(&dir.join("recall_deltas.csv"), s.as_bytes())?;
    }
    let json = serde_json::json!({ "meta": meta, "report": report, "recall_deltas": deltas });
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&json)?.as_bytes())
}

#[cfg(test)]
mod tests;
