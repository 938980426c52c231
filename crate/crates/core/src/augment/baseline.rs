use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::{AudioSource, AugRecord, RenderOptions, RenderSummary};
use crate::audio::{resample_to_len, write_wav, Stft, Waveform};
use crate::corpus::{Manifest, UtteranceRecord};
use crate::error::{Error, Result};
use crate::io::write_jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Copypaste,
    Speed,
    Pitch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub method: BaselineMethod,
    #[serde(default = "default_factors")]
    pub speed_factors: Vec<f64>,
    #[serde(default = "default_semitones")]
    pub semitones: Vec<i32>,
}

fn default_factors() -> Vec<f64> {
    vec![0.9, 1.0, 1.1]
}

fn default_semitones() -> Vec<i32> {
    vec![-2, 2]
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self { method: BaselineMethod::Speed, speed_factors: default_factors(), semitones: default_semitones() }
    }
}

impl BaselineSpec {
    fn method_tag(&self) -> &'static str {
        match self.method {
            BaselineMethod::Copypaste => "cp",
            BaselineMethod::Speed => "sp",
            BaselineMethod::Pitch => "ps",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.speed_factors.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::Config("speed factors must be positive".into()));
        }
        if self.semitones.iter().any(|s| s.abs() > 12) {
            return Err(Error::Config("semitone offsets must lie within one octave".into()));
        }
        Ok(())
    }
}

/// `a` followed by `b` with no gap. Both must carry the same emotion.
pub fn copypaste(a: (&UtteranceRecord, &Waveform), b: (&UtteranceRecord, &Waveform)) -> Result<Waveform> {
    if a.0.emotion != b.0.emotion {
        return Err(Error::Contract(format!(
            "copypaste needs matching emotions, got {} and {}",
            a.0.emotion, b.0.emotion
        )));
    }
    if a.1.sample_rate() != b.1.sample_rate() {
        return Err(Error::Contract("copypaste needs matching sample rates".into()));
    }
    let mut s = a.1.samples().to_vec();
    s.extend_from_slice(b.1.samples());
    Waveform::new(s, a.1.sample_rate())
}

/// Resampling speed change: `⌊N / factor⌋` samples, tempo and pitch scaled together.
pub fn speed_perturb(x: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Param(format!("speed factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(x.clone());
    }
    let out_len = (x.len() as f64 / factor).floor() as usize;
    Waveform::new(resample_to_len(x.samples(), factor, out_len), x.sample_rate())
}

const PV_FFT: usize = 1024;
const PV_HOP: usize = 256;

/// Phase-vocoder time stretch: output is about `len · stretch` samples.
fn time_stretch(x: &[f64], stretch: f64) -> Vec<f64> {
    let stft = Stft::new(PV_FFT, PV_FFT, PV_HOP);
    let spec = stft.forward(x);
    let nf = stft.n_freqs();
    let frames = spec.len() / nf;
    if frames < 2 {
        return x.to_vec();
    }
    let expected: Vec<f64> = (0..nf).map(|k| 2.0 * std::f64::consts::PI * k as f64 * PV_HOP as f64 / PV_FFT as f64).collect();
    let mut phase: Vec<f64> = spec[..nf].iter().map(|c| c.arg()).collect();
    let n_out = ((frames - 1) as f64 * stretch).floor() as usize + 1;
    let mut out = Vec::with_capacity(n_out * nf);
    for j in 0..n_out {
        let pos = j as f64 / stretch;
        let t = (pos.floor() as usize).min(frames - 2);
        let frac = pos - t as f64;
        let (a, b) = (&spec[t * nf..(t + 1) * nf], &spec[(t + 1) * nf..(t + 2) * nf]);
        for k in 0..nf {
            let mag = (1.0 - frac) * a[k].norm() + frac * b[k].norm();
            out.push(Complex::from_polar(mag, phase[k]));
            let mut dphi = b[k].arg() - a[k].arg() - expected[k];
            dphi -= 2.0 * std::f64::consts::PI * (dphi / (2.0 * std::f64::consts::PI)).round();
            phase[k] += expected[k] + dphi;
        }
    }
    stft.inverse(&out, n_out)
}

/// Shifts pitch by `semitones` while keeping the length: time-stretch by
/// `2^(s/12)` and resample back.
pub fn pitch_shift(x: &Waveform, semitones: f64) -> Result<Waveform> {
    if !semitones.is_finite() || semitones.abs() > 12.0 {
        return Err(Error::Param(format!("semitone offset {semitones} outside one octave")));
    }
    if semitones == 0.0 {
        return Ok(x.clone());
    }
    let ratio = 2f64.powf(semitones / 12.0);
    // Zero padding keeps the signal edges inside fully overlapped frames.
    let pad = PV_FFT;
    let mut padded = vec![0.0; pad];
    padded.extend(x.samples().iter().map(|&v| v as f64));
    padded.extend(std::iter::repeat(0.0).take(pad));
    let stretched = time_stretch(&padded, ratio);
    let s32: Vec<f32> = stretched.iter().map(|&v| v as f32).collect();
    let back = resample_to_len(&s32, ratio, padded.len());
    let out = back[pad..pad + x.len()].to_vec();
    Waveform::new(out, x.sample_rate())
}

/// `n` outputs per utterance. Speed and pitch draw their parameter from the
/// spec's list; CopyPaste appends a random same-emotion partner.
pub fn render_baseline(manifest: &Manifest, spec: &BaselineSpec, n: usize, audio: &AudioSource<'_>, opts: &RenderOptions) -> Result<RenderSummary> {
    spec.validate()?;
    if spec.method == BaselineMethod::Speed && spec.speed_factors.is_empty() || spec.method == BaselineMethod::Pitch && spec.semitones.is_empty() {
        return Err(Error::Config("baseline parameter list is empty".into()));
    }
    let wav_dir = opts.out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let recs = manifest.records();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut summary = RenderSummary::default();
    for src in recs {
        let partners: Vec<&UtteranceRecord> = recs.iter().filter(|r| r.emotion == src.emotion && r.utt_id != src.utt_id).collect();
        for j in 0..n {
            let out_id = format!("{}_{}{j:03}", src.utt_id, spec.method_tag());
            let result = (|| -> Result<AugRecord> {
                let x = audio(src)?;
                let (wave, reference, method) = match spec.method {
                    BaselineMethod::Copypaste => {
                        let b = partners.choose(&mut rng).ok_or_else(|| Error::Data(format!("no copypaste partner for {}", src.utt_id)))?;
                        (copypaste((src, &x), (b, &audio(b)?))?, b.utt_id.clone(), "copypaste".to_string())
                    }
                    BaselineMethod::Speed => {
                        let f = spec.speed_factors[rng.gen_range(0..spec.speed_factors.len())];
                        (speed_perturb(&x, f)?, src.utt_id.clone(), format!("speed:{f}"))
                    }
                    BaselineMethod::Pitch => {
                        let st = spec.semitones[rng.gen_range(0..spec.semitones.len())];
                        (pitch_shift(&x, st as f64)?, src.utt_id.clone(), format!("pitch:{st}"))
                    }
                };
                let rel = PathBuf::from("wav").join(format!("{out_id}.wav"));
                write_wav(opts.out_dir.join(&rel), &wave)?;
                Ok(AugRecord {
                    out_id: out_id.clone(),
                    path: rel,
                    speaker: src.speaker.clone(),
                    emotion: src.emotion,
                    source_id: src.utt_id.clone(),
                    ref_id: reference,
                    truncated: false,
                    session: src.session,
                    duration: wave.duration_secs(),
                    method,
                })
            })();
            match result {
                Ok(r) => summary.records.push(r),
                Err(e) => {
                    log::warn!("{out_id}: {e}");
                    summary.failures.push((out_id, e.to_string()));
                }
            }
        }
    }
    write_jsonl(&opts.out_dir.join("manifest.jsonl"), &summary.records)?;
    Ok(summary)
}
