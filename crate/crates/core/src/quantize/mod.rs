//! Discrete content units: continuous frame features, a k-means codebook and
//! run-length deduplication.

mod features;
mod kmeans;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use features::{FeatureExtractor, FeatureMatrix, FileFeatures, MelFeatures};
pub use kmeans::{fit_codebook, KMeansCodebook, KMeansConfig};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSequence {
    pub units: Vec<u32>,
    pub deduped: bool,
}

impl UnitSequence {
    pub fn raw(units: Vec<u32>) -> Self {
        Self {
            units,
            deduped: false,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Checks labels against the vocabulary and, if flagged, the no-adjacent-repeat rule.
    pub fn validate(&self, k: usize) -> Result<()> {
        if let Some(u) = self.units.iter().find(|&&u| u as usize >= k) {
            return Err(Error::Data(format!("unit {u} outside vocabulary of {k}")));
        }
        if self.deduped && self.units.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("deduped sequence has adjacent repeats".into()));
        }
        Ok(())
    }
}

/// Collapses runs of equal adjacent labels. Already-deduplicated input comes
/// back unchanged.
pub fn deduplicate(u: &UnitSequence) -> UnitSequence {
    let mut units = u.units.clone();
    units.dedup();
    UnitSequence {
        units,
        deduped: true,
    }
}

/// Drops runs shorter than `min_run` frames, then deduplicates. Transitional
/// frames between two steady segments often land in a third cluster for a
/// single frame; this keeps only units that persist.
pub fn stable_units(u: &UnitSequence, min_run: usize) -> UnitSequence {
    let mut kept: Vec<u32> = Vec::new();
    let mut i = 0;
    while i < u.units.len() {
        let mut j = i;
        while j < u.units.len() && u.units[j] == u.units[i] {
            j += 1;
        }
        if j - i >= min_run && kept.last() != Some(&u.units[i]) {
            kept.push(u.units[i]);
        }
        i = j;
    }
    UnitSequence { units: kept, deduped: true }
}

/// Nearest-centroid label for every feature frame.
pub fn quantize_features(features: &FeatureMatrix, cb: &KMeansCodebook) -> Result<UnitSequence> {
    if features.dim() != cb.feature_dim() {
        return Err(Error::Config(format!(
            "feature dimension {} does not match codebook dimension {}",
            features.dim(),
            cb.feature_dim()
        )));
    }
    Ok(UnitSequence::raw(
        features.frames().map(|f| cb.nearest(f).0 as u32).collect(),
    ))
}

pub fn quantize(
    utt_id: &str,
    x: &Waveform,
    fe: &dyn FeatureExtractor,
    cb: &KMeansCodebook,
) -> Result<UnitSequence> {
    if fe.dim() != cb.feature_dim() {
        return Err(Error::Config(format!(
            "extractor dimension {} does not match codebook dimension {}",
            fe.dim(),
            cb.feature_dim()
        )));
    }
    quantize_features(&fe.extract(utt_id, x)?, cb)
}

/// Stacks the frames of many utterances for codebook fitting.
pub fn stack_features(feats: &[FeatureMatrix]) -> Result<(Vec<f64>, usize)> {
    let dim = feats
        .first()
        .map(|f| f.dim())
        .ok_or_else(|| Error::Data("no features to stack".into()))?;
    let mut out = Vec::new();
    for f in feats {
        if f.dim() != dim {
            return Err(Error::Config("mixed feature dimensions".into()));
        }
        out.extend_from_slice(f.data());
    }
    Ok((out, dim))
}

/// One line of the unit store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub utt_id: String,
    pub units: Vec<u32>,
    pub deduped: bool,
}

pub fn save_units(path: &Path, units: &[(String, UnitSequence)]) -> Result<()> {
    let recs: Vec<UnitRecord> = units
        .iter()
        .map(|(id, u)| UnitRecord {
            utt_id: id.clone(),
            units: u.units.clone(),
            deduped: u.deduped,
        })
        .collect();
    write_jsonl(path, &recs)
}

pub fn load_units(path: &Path) -> Result<Vec<(String, UnitSequence)>> {
    Ok(read_jsonl::<UnitRecord>(path)?
        .into_iter()
        .map(|r| {
            (
                r.utt_id,
                UnitSequence {
                    units: r.units,
                    deduped: r.deduped,
                },
            )
        })
        .collect())
}

/// Levenshtein distance between two label sequences.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - edit_distance / len(reference)`, floored at zero.
pub fn unit_accuracy(reference: &[u32], hypothesis: &[u32]) -> f64 {
    if reference.is_empty() {
        return if hypothesis.is_empty() { 1.0 } else { 0.0 };
    }
    (1.0 - edit_distance(reference, hypothesis) as f64 / reference.len() as f64).max(0.0)
}
