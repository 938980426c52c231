//! Style-swap augmentation within (speaker, emotion) cells, class balancing
//! and parallel rendering to an augmented corpus.

mod baseline;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use baseline::{copypaste, pitch_shift, render_baseline, speed_perturb, BaselineMethod, BaselineSpec};

use crate::audio::{mel_spectrogram, write_wav, DspConfig, Vocoder, Waveform};
use crate::corpus::{Emotion, Manifest, UtteranceRecord};
use crate::error::{Error, Result};
use crate::io::write_jsonl;
use crate::model::{DecodeMode, Decoded, StyleTransferModel};
use crate::quantize::UnitSequence;

/// Environment variable holding the number of rendering workers.
pub const WORKERS_ENV: &str = "STYLEAUG_WORKERS";

/// Worker count from [`WORKERS_ENV`], or the available parallelism if unset.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRow {
    pub source: String,
    pub reference: String,
    pub out_id: String,
    /// The reference was drawn after the source's cell was exhausted.
    pub with_replacement: bool,
    /// Row added by class balancing rather than N-times augmentation.
    pub balance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub rows: Vec<PlanRow>,
    pub n: usize,
    pub balance: bool,
    pub seed: u64,
    /// Sources with no same-cell partner.
    pub skipped: Vec<String>,
    pub quotas: [usize; 4],
}

/// Extra rows per class that bring every class up to the largest count.
pub fn balance_quotas(counts: [usize; 4]) -> [usize; 4] {
    let max = counts.iter().copied().max().unwrap_or(0);
    counts.map(|c| max - c)
}

/// Pairs every source with references from the same speaker and emotion.
///
/// Each source draws `n` references from its cell without replacement, then
/// with replacement once the cell is exhausted. With `balance`, per-class
/// quotas then lift every class to the largest post-augmentation total, handed
/// out round-robin over the class's eligible sources.
pub fn build_plan(manifest: &Manifest, n: usize, balance: bool, seed: u64) -> Result<AugmentationPlan> {
    let recs = manifest.records();
    let cells = manifest.cells();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); recs.len()];
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); recs.len()];
    let mut skipped = Vec::new();
    for (i, r) in recs.iter().enumerate() {
        let cell = &cells[&(r.speaker.clone(), r.emotion)];
        pools[i] = cell.iter().copied().filter(|&j| j != i).collect();
        if pools[i].is_empty() && (n > 0 || balance) {
            log::warn!("{}: no other utterance from {} with emotion {}; skipped", r.utt_id, r.speaker, r.emotion);
            skipped.push(r.utt_id.clone());
        }
    }
    let mut drawn = vec![0usize; recs.len()];
    let mut rows = Vec::new();
    let mut draw = |i: usize, is_balance: bool, rows: &mut Vec<PlanRow>, rng: &mut ChaCha8Rng| {
        if queues[i].is_empty() {
            queues[i] = pools[i].clone();
            queues[i].shuffle(rng);
        }
        let j = queues[i].pop().expect("pool is non-empty");
        let with_replacement = drawn[i] >= pools[i].len();
        rows.push(PlanRow {
            source: recs[i].utt_id.clone(),
            reference: recs[j].utt_id.clone(),
            out_id: format!("{}_aug{:03}", recs[i].utt_id, drawn[i]),
            with_replacement,
            balance: is_balance,
        });
        drawn[i] += 1;
    };
    for i in 0..recs.len() {
        if pools[i].is_empty() {
            continue;
        }
        for _ in 0..n {
            draw(i, false, &mut rows, &mut rng);
        }
    }
    let mut quotas = [0; 4];
    if balance {
        let mut totals = manifest.class_counts();
        let mut eligible: [Vec<usize>; 4] = Default::default();
        for (i, r) in recs.iter().enumerate() {
            if !pools[i].is_empty() {
                eligible[r.emotion.index()].push(i);
                totals[r.emotion.index()] += n;
            }
        }
        let present = manifest.class_counts();
        let max = (0..4).filter(|&c| present[c] > 0).map(|c| totals[c]).max().unwrap_or(0);
        // Classes missing from the corpus cannot be balanced and are left out.
        quotas = std::array::from_fn(|c| if present[c] > 0 { max - totals[c] } else { 0 });
        for e in Emotion::ALL {
            let q = quotas[e.index()];
            let pool = &eligible[e.index()];
            if q > 0 && pool.is_empty() {
                return Err(Error::Data(format!("cannot balance class {e}: no utterance has a same-cell partner")));
            }
            for k in 0..q {
                draw(pool[k % pool.len()], true, &mut rows, &mut rng);
            }
        }
    }
    Ok(AugmentationPlan { rows, n, balance, seed, skipped, quotas })
}

/// Checks the same-speaker, same-emotion, distinct-utterance rule for every row.
pub fn validate_plan(plan: &AugmentationPlan, manifest: &Manifest) -> Result<()> {
    for row in &plan.rows {
        let s = manifest.get(&row.source).ok_or_else(|| Error::Data(format!("unknown source {}", row.source)))?;
        let r = manifest.get(&row.reference).ok_or_else(|| Error::Data(format!("unknown reference {}", row.reference)))?;
        if s.speaker != r.speaker || s.emotion != r.emotion || s.utt_id == r.utt_id {
            return Err(Error::Contract(format!("invalid pair {} -> {}", row.source, row.reference)));
        }
    }
    Ok(())
}

/// Decodes `units` in the style of `reference`.
pub fn transfer(model: &StyleTransferModel, units: &UnitSequence, reference: &Waveform, dsp: &DspConfig, seed: u64) -> Result<Decoded> {
    let mel = mel_spectrogram(reference, dsp)?;
    let style = model.encode_style(&mel, "")?;
    model.decode_sequence(units, &style, DecodeMode::FreeRunning { max_frames: None }, dsp, seed)
}

/// One line of an augmented-corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub out_id: String,
    pub path: PathBuf,
    pub speaker: String,
    pub emotion: Emotion,
    pub source_id: String,
    pub ref_id: String,
    pub truncated: bool,
    pub session: u32,
    pub duration: f64,
    pub method: String,
}

impl AugRecord {
    /// As a corpus record carrying the source's labels.
    pub fn to_utterance(&self) -> UtteranceRecord {
        UtteranceRecord {
            utt_id: self.out_id.clone(),
            path: self.path.clone(),
            speaker: self.speaker.clone(),
            emotion: self.emotion,
            session: self.session,
            duration: self.duration,
            tags: vec![format!("aug:{}", self.method), format!("source:{}", self.source_id), format!("ref:{}", self.ref_id)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
    pub seed: u64,
    /// Leave truncated decodes out of the manifest.
    pub drop_truncated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderSummary {
    pub records: Vec<AugRecord>,
    pub failures: Vec<(String, String)>,
    pub dropped_truncated: usize,
}

/// Audio for a record, e.g. read from disk or held in memory.
pub type AudioSource<'a> = dyn Fn(&UtteranceRecord) -> Result<Waveform> + Sync + 'a;

/// Renders every plan row with `workers` threads: transfer, vocode, write WAV.
/// Rows that fail are logged and reported; the manifest keeps plan order and
/// is written to `out_dir/manifest.jsonl`.
#[allow(clippy::too_many_arguments)]
pub fn render(
    plan: &AugmentationPlan,
    manifest: &Manifest,
    units: &HashMap<String, UnitSequence>,
    model: &StyleTransferModel,
    vocoder: &dyn Vocoder,
    dsp: &DspConfig,
    audio: &AudioSource<'_>,
    opts: &RenderOptions,
) -> Result<RenderSummary> {
    let wav_dir = opts.out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<(AugRecord, bool)>>>> = Mutex::new((0..plan.rows.len()).map(|_| None).collect());
    let job = |i: usize| -> Result<(AugRecord, bool)> {
        let row = &plan.rows[i];
        let src = manifest.get(&row.source).ok_or_else(|| Error::Data(format!("unknown source {}", row.source)))?;
        let rf = manifest.get(&row.reference).ok_or_else(|| Error::Data(format!("unknown reference {}", row.reference)))?;
        let u = units.get(&row.source).ok_or_else(|| Error::Data(format!("no units for {}", row.source)))?;
        let reference = audio(rf)?;
        let seed = opts.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let decoded = transfer(model, u, &reference, dsp, seed)?;
        let wave = vocoder.vocode(&decoded.mel)?;
        let rel = PathBuf::from("wav").join(format!("{}.wav", row.out_id));
        write_wav(opts.out_dir.join(&rel), &wave)?;
        let rec = AugRecord {
            out_id: row.out_id.clone(),
            path: rel,
            speaker: src.speaker.clone(),
            emotion: src.emotion,
            source_id: src.utt_id.clone(),
            ref_id: rf.utt_id.clone(),
            truncated: decoded.truncated,
            session: src.session,
            duration: wave.duration_secs(),
            method: "styleswap".into(),
        };
        Ok((rec, decoded.truncated))
    };
    std::thread::scope(|s| {
        for _ in 0..opts.workers.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= plan.rows.len() {
                    break;
                }
                let r = job(i);
                slots.lock().expect("render slots")[i] = Some(r);
            });
        }
    });
    let mut summary = RenderSummary::default();
    for (row, slot) in plan.rows.iter().zip(slots.into_inner().expect("render slots")) {
        match slot.expect("every row is rendered") {
            Ok((rec, truncated)) => {
                if truncated && opts.drop_truncated {
                    summary.dropped_truncated += 1;
                } else {
                    summary.records.push(rec);
                }
            }
            Err(e) => {
                log::warn!("{}: {e}", row.out_id);
                summary.failures.push((row.out_id.clone(), e.to_string()));
            }
        }
    }
    write_jsonl(&opts.out_dir.join("manifest.jsonl"), &summary.records)?;
    Ok(summary)
}

/// Reads a manifest of augmented rows.
pub fn load_aug_manifest(path: &Path) -> Result<Vec<AugRecord>> {
    let mut rows: Vec<AugRecord> = crate::io::read_jsonl(path)?;
    if let Some(dir) = path.parent() {
        for r in &mut rows {
            if r.path.is_relative() {
                r.path = dir.join(&r.path);
            }
        }
    }
    Ok(rows)
}
