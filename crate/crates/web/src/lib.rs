//! wasm-bindgen surface for `www/index.html`.

use styleaug::audio::{mel_spectrogram, DspConfig, Waveform};
use styleaug::augment::{pitch_shift, speed_perturb};
use styleaug::corpus::Emotion;
use styleaug::quantize::{deduplicate, quantize, FeatureExtractor, KMeansCodebook, KMeansConfig, MelFeatures, UnitSequence};
use styleaug::toy::{speaker_pitch, synthesize, ToyCorpus, ToyCorpusConfig, ToyStyle, ToyUtteranceSpec, ALPHABET_SIZE};
use wasm_bindgen::prelude::*;

fn js_err(e: styleaug::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_emotion(s: &str) -> Result<Emotion, String> {
    Emotion::ALL
        .into_iter()
        .find(|e| e.as_str() == s)
        .ok_or_else(|| format!("unknown emotion '{s}'"))
}

/// Symbols separated by spaces or commas, each below the alphabet size.
pub fn parse_content(s: &str) -> Result<Vec<u8>, String> {
    let v: Vec<u8> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u8>().map_err(|_| format!("'{t}' is not a symbol")))
        .collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err("content is empty".into());
    }
    if let Some(b) = v.iter().find(|&&b| b as usize >= ALPHABET_SIZE) {
        return Err(format!("symbol {b} outside 0..{ALPHABET_SIZE}"));
    }
    Ok(v)
}

/// A waveform with its log-mel spectrogram.
#[wasm_bindgen]
pub struct Clip {
    wave: Waveform,
    mel: Vec<f64>,
    n_frames: usize,
    n_mels: usize,
}

impl Clip {
    pub fn from_wave(wave: Waveform) -> styleaug::Result<Self> {
        let dsp = DspConfig::default();
        let mel = mel_spectrogram(&wave, &dsp)?;
        Ok(Self { n_frames: mel.n_frames(), n_mels: mel.n_mels(), mel: mel.data().to_vec(), wave })
    }

    pub fn wave(&self) -> &Waveform {
        &self.wave
    }
}

#[wasm_bindgen]
impl Clip {
    pub fn samples(&self) -> Vec<f32> {
        self.wave.samples().to_vec()
    }

    #[wasm_bindgen(getter)]
    pub fn sample_rate(&self) -> u32 {
        self.wave.sample_rate()
    }

    #[wasm_bindgen(getter)]
    pub fn duration(&self) -> f64 {
        self.wave.duration_secs()
    }

    #[wasm_bindgen(getter)]
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    #[wasm_bindgen(getter)]
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// RGBA pixels, `n_frames` wide and `n_mels` tall, low bins at the bottom.
    pub fn mel_rgba(&self) -> Vec<u8> {
        let (lo, hi) = self.mel.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (hi - lo).max(1e-9);
        let mut px = vec![0u8; self.n_frames * self.n_mels * 4];
        for t in 0..self.n_frames {
            for m in 0..self.n_mels {
                let v = (self.mel[t * self.n_mels + m] - lo) / span;
                let row = self.n_mels - 1 - m;
                let o = (row * self.n_frames + t) * 4;
                px[o] = (255.0 * v.powf(0.8)) as u8;
                px[o + 1] = (255.0 * v.powi(2)) as u8;
                px[o + 2] = (120.0 * (1.0 - v) + 60.0 * v) as u8;
                px[o + 3] = 255;
            }
        }
        px
    }

    /// Speed perturbation: duration scales by `1/factor`.
    pub fn speed(&self, factor: f64) -> Result<Clip, JsError> {
        Clip::from_wave(speed_perturb(&self.wave, factor).map_err(js_err)?).map_err(js_err)
    }

    pub fn pitch(&self, semitones: f64) -> Result<Clip, JsError> {
        Clip::from_wave(pitch_shift(&self.wave, semitones).map_err(js_err)?).map_err(js_err)
    }
}

/// Renders a toy utterance for speaker `speaker` of four.
#[wasm_bindgen]
pub fn synthesize_toy(content: &str, rate: f64, emotion: &str, speaker: usize) -> Result<Clip, JsError> {
    let content = parse_content(content).map_err(|e| JsError::new(&e))?;
    let emotion = parse_emotion(emotion).map_err(|e| JsError::new(&e))?;
    let cfg = ToyCorpusConfig::default();
    let st = &cfg.styles[emotion.index()];
    let spec = ToyUtteranceSpec {
        content,
        style: ToyStyle { rate, envelope: st.envelope, base_pitch: speaker_pitch(speaker.min(3), 4), level_db: st.level_db },
        speaker: format!("spk{speaker:02}"),
        emotion,
    };
    let (wave, _) = synthesize(&spec, &cfg.synth, 0).map_err(js_err)?;
    Clip::from_wave(wave).map_err(js_err)
}

/// Collapses adjacent repeats in a comma or space separated label list.
#[wasm_bindgen]
pub fn dedup_text(s: &str) -> Result<String, JsError> {
    let units: Vec<u32> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|_| JsError::new(&format!("'{t}' is not a label"))))
        .collect::<Result<_, _>>()?;
    Ok(join(&deduplicate(&UnitSequence::raw(units)).units))
}

fn join(u: &[u32]) -> String {
    u.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// A k-means codebook fitted on a small generated toy corpus.
#[wasm_bindgen]
pub struct UnitModel {
    fe: MelFeatures,
    cb: KMeansCodebook,
}

#[wasm_bindgen]
impl UnitModel {
    #[wasm_bindgen(constructor)]
    pub fn new(k: usize, seed: u64) -> Result<UnitModel, JsError> {
        let corpus = ToyCorpus::generate(&ToyCorpusConfig { n_speakers: 2, n_per_cell: 3, seed, ..Default::default() }).map_err(js_err)?;
        let fe = MelFeatures::default();
        let mut frames = Vec::new();
        for u in &corpus.utterances {
            frames.extend_from_slice(fe.extract("", &u.wave).map_err(js_err)?.data());
        }
        let cfg = KMeansConfig { k, seed, ..Default::default() };
        let cb = styleaug::quantize::fit_codebook(&frames, fe.dim(), &cfg).map_err(js_err)?;
        Ok(UnitModel { fe, cb })
    }

    #[wasm_bindgen(getter)]
    pub fn k(&self) -> usize {
        self.cb.k()
    }

    /// Frame-level labels.
    pub fn raw_units(&self, clip: &Clip) -> Result<String, JsError> {
        Ok(join(&quantize("", &clip.wave, &self.fe, &self.cb).map_err(js_err)?.units))
    }

    /// Deduplicated labels.
    pub fn units(&self, clip: &Clip) -> Result<String, JsError> {
        let u = quantize("", &clip.wave, &self.fe, &self.cb).map_err(js_err)?;
        Ok(join(&deduplicate(&u).units))
    }
}
