//! Synthetic corpus with known content and style factors.
//!
//! Every symbol of the content alphabet is a harmonic stack with its own
//! fundamental and harmonic weighting. Style is carried by the speaking rate
//! (segment duration), the amplitude envelope inside each segment, the overall
//! level and a small speaker-dependent pitch multiplier.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::corpus::{Emotion, Manifest, UtteranceRecord};
use crate::error::{Error, Result};
use crate::io::write_jsonl;

pub const ALPHABET_SIZE: usize = 12;

/// Nominal pitch that the symbol fundamentals are defined against.
pub const REFERENCE_PITCH: f64 = 200.0;

const HARMONICS: usize = 4;

/// Fundamental of each symbol at the reference pitch (Hz): a geometric ladder
/// with a 13% step.
pub fn symbol_fundamental(symbol: u8) -> f64 {
    250.0 * 1.13f64.powi(symbol as i32)
}

fn harmonic_weights(symbol: u8) -> [f64; HARMONICS] {
    const PATTERNS: [[f64; HARMONICS]; 4] = [
        [1.0, 0.6, 0.35, 0.2],
        [0.5, 1.0, 0.5, 0.25],
        [0.35, 0.5, 1.0, 0.5],
        [0.6, 0.25, 0.6, 1.0],
    ];
    PATTERNS[symbol as usize % 4]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Envelope {
    Flat,
    Decay,
    Swell,
    Tremolo,
}

impl Envelope {
    pub const ALL: [Envelope; 4] = [Envelope::Flat, Envelope::Decay, Envelope::Swell, Envelope::Tremolo];

    /// Gain at relative position `tau` in [0, 1] of a segment lasting `secs`.
    fn gain(self, tau: f64, secs: f64) -> f64 {
        match self {
            Envelope::Flat => 1.0,
            Envelope::Decay => (-1.6 * tau).exp(),
            Envelope::Swell => 0.35 + 0.65 * tau,
            Envelope::Tremolo => {
                0.7 + 0.3 * (2.0 * std::f64::consts::PI * 9.0 * tau * secs).cos()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStyle {
    /// Speaking-rate multiplier in [0.5, 2].
    pub rate: f64,
    pub envelope: Envelope,
    /// Pitch in Hz; symbol fundamentals scale by `base_pitch / REFERENCE_PITCH`.
    pub base_pitch: f64,
    pub level_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyUtteranceSpec {
    pub content: Vec<u8>,
    pub style: ToyStyle,
    pub speaker: String,
    pub emotion: Emotion,
}

impl ToyUtteranceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.content.is_empty() {
            return Err(Error::Param("toy content must not be empty".into()));
        }
        if let Some(s) = self.content.iter().find(|&&s| s as usize >= ALPHABET_SIZE) {
            return Err(Error::Param(format!("symbol {s} outside the alphabet")));
        }
        if !(0.5..=2.0).contains(&self.style.rate) {
            return Err(Error::Param(format!(
                "rate multiplier {} outside [0.5, 2]",
                self.style.rate
            )));
        }
        if !(self.style.base_pitch > 0.0) {
            return Err(Error::Param("base pitch must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth stored alongside every synthesized utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTruth {
    pub utt_id: String,
    pub spec: ToyUtteranceSpec,
    /// `(start, end)` sample range of each symbol's segment.
    pub boundaries: Vec<(usize, usize)>,
}

/// Segment timing shared by every utterance of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub sample_rate: u32,
    /// Segment duration at rate 1.0, seconds.
    pub base_dur: f64,
    /// Fraction of each segment left silent at its end.
    pub gap_fraction: f64,
    /// Raised-cosine ramp at tone onset and offset, seconds.
    pub ramp: f64,
    /// Peak amplitude at 0 dB.
    pub amplitude: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            base_dur: 0.2,
            gap_fraction: 0.15,
            ramp: 0.008,
            amplitude: 0.12,
        }
    }
}

/// Renders `spec`. `seed` draws the starting phase of every partial.
pub fn synthesize(
    spec: &ToyUtteranceSpec,
    params: &SynthParams,
    seed: u64,
) -> Result<(Waveform, Vec<(usize, usize)>)> {
    spec.validate()?;
    let sr = params.sample_rate as f64;
    let seg_len = (params.base_dur / spec.style.rate * sr).round() as usize;
    if seg_len == 0 {
        return Err(Error::Param("segment length rounds to zero samples".into()));
    }
    let tone_len = ((1.0 - params.gap_fraction) * seg_len as f64).round() as usize;
    let ramp_len = ((params.ramp * sr).round() as usize).min(tone_len / 2);
    let gain = params.amplitude * 10f64.powf(spec.style.level_db / 20.0);
    let pitch = spec.style.base_pitch / REFERENCE_PITCH;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut samples = Vec::with_capacity(seg_len * spec.content.len());
    let mut bounds = Vec::with_capacity(spec.content.len());
    for &sym in &spec.content {
        let start = samples.len();
        let f0 = symbol_fundamental(sym) * pitch;
        let weights = harmonic_weights(sym);
        let phases: Vec<f64> = (0..HARMONICS).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let secs = tone_len as f64 / sr;
        for n in 0..seg_len {
            if n >= tone_len {
                samples.push(0.0);
                continue;
            }
            let t = n as f64 / sr;
            let tau = n as f64 / tone_len.max(1) as f64;
            let mut ramp = 1.0;
            if ramp_len > 0 {
                if n < ramp_len {
                    ramp = 0.5 - 0.5 * (std::f64::consts::PI * n as f64 / ramp_len as f64).cos();
                } else if n >= tone_len - ramp_len {
                    let k = tone_len - n;
                    ramp = 0.5 - 0.5 * (std::f64::consts::PI * k as f64 / ramp_len as f64).cos();
                }
            }
            let mut v = 0.0;
            for (h, (w, ph)) in weights.iter().zip(&phases).enumerate() {
                let f = f0 * (h + 1) as f64;
                if f < sr / 2.0 {
                    v += w * (std::f64::consts::TAU * f * t + ph).sin();
                }
            }
            samples.push((gain * ramp * spec.style.envelope.gain(tau, secs) * v) as f32);
        }
        bounds.push((start, samples.len()));
    }
    Ok((Waveform::new(samples, params.sample_rate)?, bounds))
}

/// How one pseudo-emotion shapes style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmotionStyle {
    pub rate_min: f64,
    pub rate_max: f64,
    pub envelope: Envelope,
    pub level_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusConfig {
    pub n_speakers: usize,
    pub n_per_cell: usize,
    /// Per-emotion cell sizes overriding `n_per_cell`, to induce imbalance.
    pub cell_sizes: Option<[usize; 4]>,
    pub min_symbols: usize,
    pub max_symbols: usize,
    /// Draw a new content for every utterance instead of sharing the `j`-th
    /// content across all speakers and emotions.
    pub fresh_contents: bool,
    pub sessions: u32,
    pub seed: u64,
    /// Uniform per-utterance level jitter, +/- dB.
    pub level_jitter_db: f64,
    /// Uniform per-speaker level offset, +/- dB.
    pub speaker_level_db: f64,
    /// Angry, happy, neutral, sad.
    pub styles: [EmotionStyle; 4],
    pub synth: SynthParams,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            n_per_cell: 10,
            cell_sizes: None,
            min_symbols: 3,
            max_symbols: 5,
            fresh_contents: false,
            sessions: 5,
            seed: 0,
            level_jitter_db: 1.5,
            speaker_level_db: 2.0,
            styles: [
                EmotionStyle { rate_min: 1.2, rate_max: 2.0, envelope: Envelope::Decay, level_db: 3.0 },
                EmotionStyle { rate_min: 1.0, rate_max: 2.0, envelope: Envelope::Tremolo, level_db: 1.0 },
                EmotionStyle { rate_min: 0.8, rate_max: 1.4, envelope: Envelope::Flat, level_db: 0.0 },
                EmotionStyle { rate_min: 0.6, rate_max: 1.0, envelope: Envelope::Swell, level_db: -3.0 },
            ],
            synth: SynthParams::default(),
        }
    }
}

/// Pitch of speaker `s`: an evenly spaced ladder within +/-6% of the reference.
pub fn speaker_pitch(s: usize, n_speakers: usize) -> f64 {
    if n_speakers <= 1 {
        return REFERENCE_PITCH;
    }
    REFERENCE_PITCH * (0.94 + 0.12 * s as f64 / (n_speakers - 1) as f64)
}

pub fn speaker_id(s: usize) -> String {
    format!("spk{s:02}")
}

#[derive(Debug, Clone)]
pub struct ToyUtterance {
    pub record: UtteranceRecord,
    pub truth: ToyTruth,
    pub wave: Waveform,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub config: ToyCorpusConfig,
    pub utterances: Vec<ToyUtterance>,
}

impl ToyCorpus {
    /// Factorial corpus over speakers × emotions × a shared pool of contents.
    pub fn generate(config: &ToyCorpusConfig) -> Result<Self> {
        if config.n_speakers == 0 || config.n_per_cell == 0 {
            return Err(Error::Param("toy corpus counts must be at least 1".into()));
        }
        if config.min_symbols == 0 || config.max_symbols < config.min_symbols {
            return Err(Error::Param("invalid toy content length range".into()));
        }
        if config.sessions == 0 {
            return Err(Error::Param("toy corpus needs at least one session".into()));
        }
        let sizes = config.cell_sizes.unwrap_or([config.n_per_cell; 4]);
        let n_contents = sizes.iter().copied().max().unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let symbols: Vec<u8> = (0..ALPHABET_SIZE as u8).collect();
        let draw = |rng: &mut ChaCha8Rng| {
            let len = rng.gen_range(config.min_symbols..=config.max_symbols);
            // No symbol repeats back to back, so segments stay distinguishable.
            let mut out: Vec<u8> = Vec::with_capacity(len);
            while out.len() < len {
                let s = *symbols.choose(rng).unwrap();
                if out.last() != Some(&s) {
                    out.push(s);
                }
            }
            out
        };
        let contents: Vec<Vec<u8>> = (0..n_contents).map(|_| draw(&mut rng)).collect();
        let speaker_gain: Vec<f64> = (0..config.n_speakers)
            .map(|_| rng.gen_range(-1.0..=1.0) * config.speaker_level_db)
            .collect();

        let mut utterances = Vec::new();
        for s in 0..config.n_speakers {
            let session = (s as u32 % config.sessions) + 1;
            for emotion in Emotion::ALL {
                let st = &config.styles[emotion.index()];
                for (j, shared) in contents.iter().take(sizes[emotion.index()]).enumerate() {
                    let content = if config.fresh_contents { draw(&mut rng) } else { shared.clone() };
                    let rate = rng.gen_range(st.rate_min..=st.rate_max);
                    let jitter = rng.gen_range(-1.0..=1.0) * config.level_jitter_db;
                    let spec = ToyUtteranceSpec {
                        content,
                        style: ToyStyle {
                            rate,
                            envelope: st.envelope,
                            base_pitch: speaker_pitch(s, config.n_speakers),
                            level_db: st.level_db + speaker_gain[s] + jitter,
                        },
                        speaker: speaker_id(s),
                        emotion,
                    };
                    let utt_id = format!("{}_{}_{j:03}", speaker_id(s), emotion.as_str());
                    let phase_seed = rng.gen();
                    let (wave, boundaries) = synthesize(&spec, &config.synth, phase_seed)?;
                    let record = UtteranceRecord {
                        utt_id: utt_id.clone(),
                        path: format!("wav/{utt_id}.wav").into(),
                        speaker: spec.speaker.clone(),
                        emotion,
                        session,
                        duration: wave.duration_secs(),
                        tags: if config.fresh_contents { Vec::new() } else { vec![format!("content{j:03}")] },
                    };
                    utterances.push(ToyUtterance {
                        record,
                        truth: ToyTruth {
                            utt_id,
                            spec,
                            boundaries,
                        },
                        wave,
                    });
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            utterances,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::new(self.utterances.iter().map(|u| u.record.clone()).collect())
            .expect("toy utterance ids are unique")
    }

    pub fn truths(&self) -> Vec<ToyTruth> {
        self.utterances.iter().map(|u| u.truth.clone()).collect()
    }

    pub fn get(&self, utt_id: &str) -> Option<&ToyUtterance> {
        self.utterances.iter().find(|u| u.record.utt_id == utt_id)
    }

    /// Writes `wav/*.wav`, `manifest.jsonl` and the `truth.jsonl` sidecar under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let wav_dir = dir.join("wav");
        std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
        for u in &self.utterances {
            write_wav(dir.join(&u.record.path), &u.wave)?;
        }
        self.manifest().save(&dir.join("manifest.jsonl"))?;
        write_jsonl(&dir.join("truth.jsonl"), &self.truths())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(content: Vec<u8>, rate: f64) -> ToyUtteranceSpec {
        ToyUtteranceSpec {
            content,
            style: ToyStyle {
                rate,
                envelope: Envelope::Flat,
                base_pitch: REFERENCE_PITCH,
                level_db: 0.0,
            },
            speaker: "spk00".into(),
            emotion: Emotion::Neutral,
        }
    }

    #[test]
    fn duration_follows_rate() {
        let p = SynthParams::default();
        let (w, b) = synthesize(&spec(vec![0, 5, 9], 1.0), &p, 1).unwrap();
        assert_eq!(w.len(), 9600);
        assert!((w.duration_secs() - 0.6).abs() < 1e-12);
        assert_eq!(b, vec![(0, 3200), (3200, 6400), (6400, 9600)]);
        let (w2, _) = synthesize(&spec(vec![0, 5, 9], 2.0), &p, 1).unwrap();
        assert!((w2.duration_secs() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let p = SynthParams::default();
        assert!(synthesize(&spec(vec![0], 2.5), &p, 0).is_err());
        assert!(synthesize(&spec(vec![12], 1.0), &p, 0).is_err());
        assert!(synthesize(&spec(vec![], 1.0), &p, 0).is_err());
    }

    #[test]
    fn corpus_is_factorial_and_deterministic() {
        let cfg = ToyCorpusConfig::default();
        let a = ToyCorpus::generate(&cfg).unwrap();
        assert_eq!(a.len(), 160);
        for cell in a.manifest().cells().values() {
            assert!(cell.len() >= 2);
        }
        let b = ToyCorpus::generate(&cfg).unwrap();
        let ja = serde_json::to_string(a.manifest().records()).unwrap();
        let jb = serde_json::to_string(b.manifest().records()).unwrap();
        assert_eq!(ja, jb);
        assert_eq!(a.utterances[7].wave, b.utterances[7].wave);
        assert!(a.utterances.iter().all(|u| u.wave.samples().iter().all(|s| s.abs() <= 1.0)));
    }

    #[test]
    fn fresh_contents_vary_within_the_grid() {
        let cfg = ToyCorpusConfig { n_speakers: 2, n_per_cell: 3, fresh_contents: true, ..Default::default() };
        let c = ToyCorpus::generate(&cfg).unwrap();
        assert_eq!(c.len(), 24);
        let distinct: std::collections::HashSet<_> = c.utterances.iter().map(|u| u.truth.spec.content.clone()).collect();
        assert!(distinct.len() > 12);
        assert_eq!(ToyCorpus::generate(&cfg).unwrap().manifest(), c.manifest());
    }

    #[test]
    fn imbalanced_cells() {
        let cfg = ToyCorpusConfig {
            n_speakers: 2,
            cell_sizes: Some([4, 4, 6, 2]),
            ..Default::default()
        };
        let c = ToyCorpus::generate(&cfg).unwrap();
        assert_eq!(c.manifest().class_counts(), [8, 8, 12, 4]);
    }
}
