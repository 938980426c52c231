//! Manifest-level glue shared by the command line and the test suites.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::audio::{load_waveform, mel_spectrogram, DspConfig, WavReadOptions, Waveform};
use crate::config::ExperimentConfig;
use crate::corpus::UtteranceRecord;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::par::par_map;
use crate::quantize::{
    deduplicate, fit_codebook, quantize_features, stack_features, FeatureExtractor, FeatureMatrix, FileFeatures, KMeansCodebook,
    KMeansConfig, MelFeatures, UnitSequence,
};
use crate::ser::SerItem;
use crate::train::TrainItem;

pub fn load_audio(rec: &UtteranceRecord, dsp: &DspConfig) -> Result<Waveform> {
    load_waveform(&rec.path, &WavReadOptions { sample_rate: dsp.sample_rate, ..Default::default() })
}

fn file_features(cfg: &ExperimentConfig) -> Option<FileFeatures> {
    let dir = cfg.features.dir.as_ref()?;
    Some(FileFeatures {
        dir: dir.clone(),
        dim: cfg.features.dim.unwrap_or(0),
        frame_rate: cfg.features.frame_rate.unwrap_or(0.0),
    })
}

/// Features for unit discovery: precomputed matrices if configured, otherwise
/// level-normalized log-mels.
pub fn unit_extractor(cfg: &ExperimentConfig) -> Box<dyn FeatureExtractor> {
    match file_features(cfg) {
        Some(f) => Box::new(f),
        None => Box::new(cfg.mel_features()),
    }
}

/// Features for emotion recognition. The mel fallback keeps absolute level,
/// which unit discovery deliberately discards.
pub fn ser_extractor(cfg: &ExperimentConfig) -> Box<dyn FeatureExtractor> {
    match file_features(cfg) {
        Some(f) => Box::new(f),
        None => Box::new(MelFeatures { normalize: false, ..cfg.mel_features() }),
    }
}

pub fn extract(records: &[UtteranceRecord], fe: &dyn FeatureExtractor, dsp: &DspConfig, workers: usize) -> Result<Vec<FeatureMatrix>> {
    par_map(records.len(), workers, |i| {
        let r = &records[i];
        fe.extract(&r.utt_id, &load_audio(r, dsp)?)
    })
}

pub fn fit_quantizer(feats: &[FeatureMatrix], k: &KMeansConfig) -> Result<KMeansCodebook> {
    let (stack, dim) = stack_features(feats)?;
    fit_codebook(&stack, dim, k)
}

/// Deduplicated unit sequences keyed by utterance id.
pub fn quantize_all(records: &[UtteranceRecord], feats: &[FeatureMatrix], cb: &KMeansCodebook) -> Result<Vec<(String, UnitSequence)>> {
    records
        .iter()
        .zip(feats)
        .map(|(r, f)| Ok((r.utt_id.clone(), deduplicate(&quantize_features(f, cb)?))))
        .collect()
}

/// Pairs each record's units with its target mel. Records without units are skipped.
pub fn train_items(records: &[UtteranceRecord], units: &HashMap<String, UnitSequence>, dsp: &DspConfig, workers: usize) -> Result<Vec<TrainItem>> {
    let with_units: Vec<&UtteranceRecord> = records.iter().filter(|r| units.contains_key(&r.utt_id)).collect();
    if with_units.len() < records.len() {
        log::warn!("{} records have no unit sequence and are skipped", records.len() - with_units.len());
    }
    par_map(with_units.len(), workers, |i| {
        let r = with_units[i];
        Ok(TrainItem {
            utt_id: r.utt_id.clone(),
            units: units[&r.utt_id].clone(),
            mel: mel_spectrogram(&load_audio(r, dsp)?, dsp)?,
        })
    })
}

pub fn ser_items(records: &[UtteranceRecord], fe: &dyn FeatureExtractor, dsp: &DspConfig, workers: usize) -> Result<Vec<SerItem>> {
    let feats = extract(records, fe, dsp, workers)?;
    Ok(records.iter().zip(feats).map(|(r, f)| SerItem::from_record(r, f)).collect())
}

/// Machine-readable summary written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub unix_time: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

impl RunReport {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs.insert(key.into(), path.display().to_string());
        self
    }

    pub fn output(mut self, key: &str, path: &Path) -> Self {
        self.outputs.insert(key.into(), path.display().to_string());
        self
    }

    /// Writes `<dir>/<command>.report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}.report.json", self.command));
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}
