//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `STYLEAUG_ACCEPT_ONLY=1,5` runs a subset. `STYLEAUG_ACCEPT_MODEL=path`
//! reuses a style-transfer checkpoint instead of training one (criteria 4, 9).

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use styleaug::audio::{mel_spectrogram, DspConfig, GriffinLim, MelSpectrogram, Vocoder, Waveform};
use styleaug::augment::{balance_quotas, build_plan, copypaste, pitch_shift, render, speed_perturb, RenderOptions};
use styleaug::config::ExperimentConfig;
use styleaug::corpus::{Emotion, Manifest, UtteranceRecord};
use styleaug::model::{DecodeMode, Decoded, ModelConfig, StyleTransferModel};
use styleaug::nn::{grad_check, LayerSpec, Tensor};
use styleaug::quantize::{
    deduplicate, fit_codebook, quantize, quantize_features, stable_units, stack_features, unit_accuracy,
    FeatureExtractor, FeatureMatrix, KMeansCodebook, KMeansConfig, MelFeatures, UnitSequence,
};
use styleaug::ser::{cross_validate, leakage_guard, make_folds, ConfusionMatrix, CvReport, SerConfig, SerItem};
use styleaug::toy::{synthesize, ToyCorpus, ToyCorpusConfig, ToyUtterance, ALPHABET_SIZE};
use styleaug::train::{
    lr_at, pretrain_labels, pretrain_style, split_validation, LrGroup, TrainConfig, TrainItem, Trainer,
};

type Outcome = (bool, String);

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("STYLEAUG_ACCEPT_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().map_or(true, |o| o.contains(&i));
    let mut shared: Option<Toy> = None;
    let mut failed = 0;
    let criteria: [(usize, &str); 9] = [
        (1, "unit pipeline oracle"),
        (2, "gradient suite"),
        (3, "training sanity"),
        (4, "toy disentanglement"),
        (5, "balancing arithmetic"),
        (6, "metrics oracle"),
        (7, "fold correctness"),
        (8, "baseline laws"),
        (9, "end-to-end trend"),
    ];
    for (i, name) in criteria {
        if !wanted(i) {
            continue;
        }
        let start = Instant::now();
        let result = match i {
            1 => c1_units(),
            2 => c2_gradients(),
            3 => c3_training(),
            4 => toy(&mut shared).and_then(c4_disentanglement),
            5 => c5_balancing(),
            6 => c6_metrics(),
            7 => c7_folds(),
            8 => c8_baselines(),
            _ => toy(&mut shared).and_then(c9_trend),
        };
        let (ok, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        println!(
            "criterion {i} {name}: {} ({detail}) [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- 1

fn c1_units() -> styleaug::Result<Outcome> {
    let worked = deduplicate(&UnitSequence::raw(vec![23, 23, 2, 2, 2, 41, 57, 57]));
    let example_ok = worked.units == vec![23, 2, 41, 57] && deduplicate(&worked) == worked;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut idempotent = true;
    for _ in 0..200 {
        let len = rng.gen_range(0..80);
        let u = UnitSequence::raw((0..len).map(|_| rng.gen_range(0..5)).collect());
        let once = deduplicate(&u);
        idempotent &= deduplicate(&once) == once && once.units.windows(2).all(|w| w[0] != w[1]);
    }

    let (k, dim, n) = (50, 16, 1000);
    let cents: Vec<f64> = (0..k * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cb = KMeansCodebook::from_centroids(cents.clone(), k, dim, 0)?;
    let frames: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.2..1.2)).collect();
    let got = quantize_features(&FeatureMatrix::new(n, dim, frames.clone())?, &cb)?;
    let mut mismatches = 0;
    for t in 0..n {
        let f = &frames[t * dim..(t + 1) * dim];
        let mut best = (f64::INFINITY, 0);
        for c in 0..k {
            let d: f64 = f.iter().zip(&cents[c * dim..(c + 1) * dim]).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        mismatches += usize::from(got.units[t] as usize != best.1);
    }
    Ok((
        example_ok && idempotent && mismatches == 0,
        format!("worked example {example_ok}, idempotence {idempotent}, {mismatches}/{n} brute-force mismatches"),
    ))
}

// ---------------------------------------------------------------- 2

fn c2_gradients() -> styleaug::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut lines = Vec::new();
    let mut all = true;
    for kind in ["fc", "conv1d", "batchnorm", "relu", "tanh", "softmax", "lstm", "bilstm", "embedding"] {
        let mut worst: f64 = 0.0;
        let mut passed = 0;
        for seed in 0..5u64 {
            let d = |rng: &mut ChaCha8Rng| rng.gen_range(2..6usize);
            let (spec, shape, tol) = match kind {
                "fc" => (LayerSpec::Fc { in_dim: d(&mut rng), out_dim: d(&mut rng) }, None, 1e-4),
                "conv1d" => {
                    let kernel = [1, 3, 5][rng.gen_range(0..3)];
                    let dilation = rng.gen_range(1..3);
                    let spec = LayerSpec::Conv1d {
                        in_channels: d(&mut rng),
                        out_channels: d(&mut rng),
                        kernel,
                        padding: dilation * (kernel - 1) / 2,
                        dilation,
                    };
                    (spec, None, 1e-4)
                }
                "batchnorm" => (LayerSpec::BatchNorm { channels: d(&mut rng) }, None, 1e-3),
                "relu" => (LayerSpec::Relu, None, 1e-3),
                "tanh" => (LayerSpec::Tanh, None, 1e-3),
                "softmax" => (LayerSpec::Softmax, None, 1e-3),
                "lstm" => (LayerSpec::Lstm { in_dim: d(&mut rng), hidden: d(&mut rng) }, None, 1e-3),
                "bilstm" => (LayerSpec::BiLstm { in_dim: d(&mut rng), hidden: d(&mut rng) }, None, 1e-3),
                _ => {
                    let vocab = rng.gen_range(3..9);
                    (LayerSpec::Embedding { vocab, dim: d(&mut rng) }, Some(vocab), 1e-3)
                }
            };
            let (b, t) = (rng.gen_range(1..4), rng.gen_range(2..7));
            let input = match (&spec, shape) {
                (_, Some(vocab)) => Tensor::new(vec![b, t], (0..b * t).map(|_| rng.gen_range(0..vocab) as f64).collect())?,
                (LayerSpec::Fc { in_dim, .. }, _) => rand_tensor(&mut rng, vec![b, *in_dim]),
                (LayerSpec::Conv1d { in_channels, .. }, _) => rand_tensor(&mut rng, vec![b, t, *in_channels]),
                (LayerSpec::BatchNorm { channels }, _) => rand_tensor(&mut rng, vec![b.max(2), t, *channels]),
                (LayerSpec::Lstm { in_dim, .. } | LayerSpec::BiLstm { in_dim, .. }, _) => rand_tensor(&mut rng, vec![b, t, *in_dim]),
                _ => rand_tensor(&mut rng, vec![b, t]),
            };
            let r = grad_check(&spec, &input, 1e-5, tol, seed)?;
            worst = worst.max(r.max_rel_error);
            passed += usize::from(r.passed);
        }
        all &= passed == 5;
        lines.push(format!("{kind} {passed}/5 max {worst:.1e}"));
    }
    Ok((all, lines.join(", ")))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

// ---------------------------------------------------------------- 3

fn c3_training() -> styleaug::Result<Outcome> {
    let corpus = ToyCorpus::generate(&ToyCorpusConfig { n_speakers: 2, n_per_cell: 1, ..Default::default() })?;
    let fe = MelFeatures::default();
    let feats: Vec<FeatureMatrix> = corpus.utterances.iter().map(|u| fe.extract("", &u.wave)).collect::<styleaug::Result<_>>()?;
    let (stack, dim) = stack_features(&feats)?;
    let cb = fit_codebook(&stack, dim, &KMeansConfig { k: 24, ..Default::default() })?;
    let dsp = DspConfig::default();
    let mut items = Vec::new();
    for (u, f) in corpus.utterances.iter().zip(&feats).take(4) {
        items.push((deduplicate(&quantize_features(f, &cb)?), mel_spectrogram(&u.wave, &dsp)?));
    }
    let model = StyleTransferModel::new(ModelConfig::toy(24), 3)?;
    let batch = model.batch(&items.iter().map(|(u, m)| (u, m)).collect::<Vec<_>>())?;
    let cfg = TrainConfig { sampling_max: 0.0, ..Default::default() };
    let mut t = Trainer::new(model, cfg.clone())?;
    let mut mse = Vec::new();
    let mut ratio_ok = true;
    for _ in 0..500 {
        let s = t.step(&batch)?;
        mse.push(s.mse);
        let (main, para) = (t.state.lr_main, t.state.lr_paralinguistic);
        ratio_ok &= (main - 10.0 * para).abs() <= 1e-15 * main;
    }
    let first = mse[0];
    let last = mse[mse.len() - 10..].iter().sum::<f64>() / 10.0;
    let drop = 1.0 - last / first;

    let lr0 = lr_at(0, &cfg, LrGroup::Main);
    let lr12k = lr_at(12_000, &cfg, LrGroup::Main);
    let schedule_ok = (lr0 - 1e-3).abs() < 1e-15 && (lr12k - 8.1e-4).abs() < 1e-15;
    for it in [0u64, 4_999, 5_000, 12_000, 250_000] {
        let (m, p) = (lr_at(it, &cfg, LrGroup::Main), lr_at(it, &cfg, LrGroup::Paralinguistic));
        ratio_ok &= (m - 10.0 * p).abs() <= 1e-15 * m;
    }
    Ok((
        drop >= 0.9 && schedule_ok && ratio_ok,
        format!(
            "MSE {first:.4} -> {last:.4} ({:.1}% drop), lr {lr0:.2e} -> {lr12k:.2e} at 12000, 10x ratio {ratio_ok}",
            100.0 * drop
        ),
    ))
}

// ---------------------------------------------------------------- 4 and 9 share a model

/// Runs shorter than this are transition frames: a frame whose analysis window
/// straddles a segment boundary can land in a third cluster.
const MIN_RUN: usize = 3;

struct Toy {
    corpus: ToyCorpus,
    fe: MelFeatures,
    cb: KMeansCodebook,
    model: StyleTransferModel,
    val: Vec<TrainItem>,
    dsp: DspConfig,
    vocoder: GriffinLim,
    train_note: String,
}

fn toy_config() -> ToyCorpusConfig {
    ToyCorpusConfig { n_speakers: 4, n_per_cell: 30, seed: 0, ..Default::default() }
}

fn toy(shared: &mut Option<Toy>) -> styleaug::Result<&Toy> {
    if shared.is_none() {
        *shared = Some(build_toy()?);
    }
    Ok(shared.as_ref().expect("just built"))
}

fn build_toy() -> styleaug::Result<Toy> {
    let exp = ExperimentConfig::toy();
    let corpus = ToyCorpus::generate(&toy_config())?;
    let fe = exp.mel_features();
    let dsp = exp.dsp.clone();
    let feats: Vec<FeatureMatrix> = corpus.utterances.iter().map(|u| fe.extract("", &u.wave)).collect::<styleaug::Result<_>>()?;
    let (stack, dim) = stack_features(&feats)?;
    let cb = fit_codebook(&stack, dim, &exp.quantizer)?;
    let mut items = Vec::new();
    for (u, f) in corpus.utterances.iter().zip(&feats) {
        items.push(TrainItem {
            utt_id: u.record.utt_id.clone(),
            units: deduplicate(&quantize_features(f, &cb)?),
            mel: mel_spectrogram(&u.wave, &dsp)?,
        });
    }
    let (train, val, _) = split_validation(&items, exp.train.val_size, exp.train.val_fraction, exp.train.seed);
    let (model, train_note) = match std::env::var("STYLEAUG_ACCEPT_MODEL") {
        Ok(p) => (StyleTransferModel::load(&PathBuf::from(&p))?.0, format!("model from {p}")),
        Err(_) => {
            let mut model = StyleTransferModel::new(exp.model.clone(), exp.seed)?;
            let recs: Vec<&UtteranceRecord> = train.iter().map(|it| &corpus.get(&it.utt_id).expect("toy item").record).collect();
            let (labels, n_classes) = pretrain_labels(&recs, exp.pretrain.target);
            let labelled: Vec<(usize, &MelSpectrogram)> = labels.into_iter().zip(train.iter().map(|it| &it.mel)).collect();
            pretrain_style(&mut model, &labelled, n_classes, &exp.pretrain)?;
            let mut t = Trainer::new(model, exp.train.clone())?;
            let rep = t.fit(&train, &val, |_, _, _| {})?;
            let note = format!(
                "{} epochs, best val {:.4}, {:?}",
                rep.state.epoch,
                rep.state.best_val.unwrap_or(f64::NAN),
                rep.stop
            );
            let model = t.into_model();
            let dir = std::env::temp_dir().join("styleaug-acceptance");
            std::fs::create_dir_all(&dir).map_err(|e| styleaug::Error::io(&dir, e))?;
            model.save(&dir.join("model.ckpt"), serde_json::json!({ "note": note }))?;
            (model, note)
        }
    };
    Ok(Toy { corpus, fe, cb, model, val, dsp, vocoder: exp.vocoder(), train_note })
}

impl Toy {
    fn decode(&self, units: &UnitSequence, reference: &MelSpectrogram) -> styleaug::Result<Decoded> {
        let style = self.model.encode_style(reference, "")?;
        self.model.decode_sequence(units, &style, DecodeMode::FreeRunning { max_frames: None }, &self.dsp, 0)
    }

    fn stable(&self, x: &Waveform) -> styleaug::Result<Vec<u32>> {
        Ok(stable_units(&quantize("", x, &self.fe, &self.cb)?, MIN_RUN).units)
    }

    fn recovered(&self, d: &Decoded) -> styleaug::Result<Vec<u32>> {
        self.stable(&self.vocoder.vocode(&d.mel)?)
    }

    fn utterance(&self, id: &str) -> &ToyUtterance {
        self.corpus.get(id).expect("validation item comes from the corpus")
    }
}

/// Steps whose most-attended unit lies before the previous step's.
fn backward_steps(d: &Decoded) -> (usize, usize) {
    let l = d.memory_len;
    let argmax: Vec<usize> = d
        .alignments
        .chunks(l)
        .map(|row| (0..l).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0))
        .collect();
    let back = argmax.windows(2).filter(|w| w[1] < w[0]).count();
    (back, argmax.len().saturating_sub(1))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn c4_disentanglement(toy: &Toy) -> styleaug::Result<Outcome> {
    let (mut back, mut steps) = (0, 0);

    // (a) self-reconstruction
    let mut acc_a = Vec::new();
    for it in &toy.val {
        let d = toy.decode(&it.units, &it.mel)?;
        let (b, s) = backward_steps(&d);
        back += b;
        steps += s;
        let truth = toy.stable(&toy.utterance(&it.utt_id).wave)?;
        acc_a.push(unit_accuracy(&truth, &toy.recovered(&d)?));
    }
    let a = mean(&acc_a);

    // (b) a rate-2.0 reference from the same speaker and emotion with other content
    let (mut moved, mut gap) = (0.0, 0.0);
    let mut acc_b = Vec::new();
    for it in &toy.val {
        let src = toy.utterance(&it.utt_id);
        let spec = &src.truth.spec;
        if !matches!(spec.emotion, Emotion::Angry | Emotion::Happy) || spec.style.rate > 1.8 {
            continue;
        }
        let mut rspec = spec.clone();
        rspec.content = spec.content.iter().map(|&s| (s + 5) % ALPHABET_SIZE as u8).collect();
        rspec.style.rate = 2.0;
        let (rw, _) = synthesize(&rspec, &toy.corpus.config.synth, 7)?;
        let d = toy.decode(&it.units, &mel_spectrogram(&rw, &toy.dsp)?)?;
        let (b, s) = backward_steps(&d);
        back += b;
        steps += s;
        let d_src = it.mel.n_frames() as f64;
        let target = d_src * spec.style.rate / 2.0;
        moved += d_src - d.mel.n_frames() as f64;
        gap += d_src - target;
        acc_b.push(unit_accuracy(&toy.stable(&src.wave)?, &toy.recovered(&d)?));
    }
    let shift = moved / gap;
    let b = mean(&acc_b);

    // (c)
    let violations = back as f64 / steps.max(1) as f64;

    let ok = a >= 0.8 && shift >= 0.5 && b >= 0.7 && violations <= 0.05;
    Ok((
        ok,
        format!(
            "{}; (a) unit recovery {a:.3} on {} held-out; (b) duration shift {shift:.3} of the gap, content {b:.3} on {} sources; (c) backward attention steps {:.2}%",
            toy.train_note,
            acc_a.len(),
            acc_b.len(),
            100.0 * violations
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn c5_balancing() -> styleaug::Result<Outcome> {
    let counts = [1103, 1636, 1708, 1084];
    let quotas = balance_quotas(counts);
    let mut recs = Vec::new();
    for e in Emotion::ALL {
        for i in 0..counts[e.index()] {
            recs.push(record(&format!("{e}{i}"), &format!("spk{}", i % 10), e, 1 + (i % 10) as u32 / 2));
        }
    }
    let m = Manifest::new(recs)?;
    let plan = build_plan(&m, 0, true, 0)?;
    let mut totals = m.class_counts();
    for r in &plan.rows {
        totals[m.get(&r.source).expect("plan source").emotion.index()] += 1;
    }
    let ok = quotas == [605, 72, 0, 624] && plan.quotas == quotas && totals.iter().all(|&t| t == totals[0]);
    Ok((ok, format!("quotas {quotas:?}, plan quotas {:?}, totals {totals:?}", plan.quotas)))
}

fn record(id: &str, speaker: &str, emotion: Emotion, session: u32) -> UtteranceRecord {
    UtteranceRecord {
        utt_id: id.into(),
        path: format!("{id}.wav").into(),
        speaker: speaker.into(),
        emotion,
        session,
        duration: 1.0,
        tags: vec![],
    }
}

// ---------------------------------------------------------------- 6

fn c6_metrics() -> styleaug::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..300);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let s = ConfusionMatrix::from_predictions(&truth, &pred)?.scores()?;
        let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count();
        let wa = correct as f64 / n as f64;
        let mut recalls = Vec::new();
        for c in 0..4 {
            let rows: Vec<usize> = (0..n).filter(|&i| truth[i] == c).collect();
            if !rows.is_empty() {
                recalls.push(rows.iter().filter(|&&i| pred[i] == c).count() as f64 / rows.len() as f64);
            }
        }
        let ua = recalls.iter().sum::<f64>() / recalls.len() as f64;
        mismatches += usize::from(s.wa != wa || s.ua != ua);
    }
    let mut diag = ConfusionMatrix::default();
    (0..4).for_each(|c| diag.counts[c][c] = 5 + c as u64);
    let d = diag.scores()?;
    let diagonal_ok = d.wa == 1.0 && d.ua == 1.0;
    let mut balanced_gap: f64 = 0.0;
    for _ in 0..100 {
        let per = rng.gen_range(1..50);
        let truth: Vec<usize> = (0..4 * per).map(|i| i / per).collect();
        let pred: Vec<usize> = truth.iter().map(|&t| if rng.gen_bool(0.6) { t } else { rng.gen_range(0..4) }).collect();
        let s = ConfusionMatrix::from_predictions(&truth, &pred)?.scores()?;
        balanced_gap = balanced_gap.max((s.wa - s.ua).abs());
    }
    let ok = mismatches == 0 && diagonal_ok && balanced_gap <= 4.0 * f64::EPSILON;
    Ok((ok, format!("{mismatches}/100 mismatches, diagonal {diagonal_ok}, balanced |WA-UA| max {balanced_gap:.1e}")))
}

// ---------------------------------------------------------------- 7

fn c7_folds() -> styleaug::Result<Outcome> {
    let sessions = [3, 1, 5, 2, 4];
    let folds = make_folds(&sessions)?;
    let mut tested = [0; 6];
    let mut partition = true;
    for f in &folds {
        tested[f.test as usize] += 1;
        let mut all: Vec<u32> = f.train.clone();
        all.push(f.test);
        all.push(f.validation);
        all.sort_unstable();
        partition &= all == vec![1, 2, 3, 4, 5] && f.test != f.validation;
    }
    let once = tested[1..].iter().all(|&c| c == 1);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let session_of: HashMap<String, u32> = (0..100).map(|i| (format!("u{i}"), 1 + (i % 5) as u32)).collect();
    let feats = FeatureMatrix::new(1, 1, vec![0.0])?;
    let (mut planted, mut caught, mut clean_kept, mut clean) = (0, 0, 0, 0);
    for f in &folds {
        let in_train: Vec<String> = session_of.iter().filter(|(_, s)| f.train.contains(s)).map(|(u, _)| u.clone()).collect();
        let outside: Vec<String> = session_of.iter().filter(|(_, s)| !f.train.contains(s)).map(|(u, _)| u.clone()).collect();
        let mut aug = Vec::new();
        let mut leaky = Vec::new();
        for j in 0..200 {
            let pick = |v: &Vec<String>, rng: &mut ChaCha8Rng| v[rng.gen_range(0..v.len())].clone();
            let (src, rf, leak) = match j % 4 {
                0 => (pick(&outside, &mut rng), pick(&in_train, &mut rng), true),
                1 => (pick(&in_train, &mut rng), pick(&outside, &mut rng), true),
                _ => (pick(&in_train, &mut rng), pick(&in_train, &mut rng), false),
            };
            let id = format!("aug{j}");
            if leak {
                leaky.push(id.clone());
            }
            aug.push(SerItem {
                utt_id: id,
                emotion: Emotion::Neutral,
                session: session_of[&src],
                derived_from: vec![src, rf],
                features: feats.clone(),
            });
        }
        let (kept, dropped) = leakage_guard(&aug, f, &session_of);
        planted += leaky.len();
        caught += leaky.iter().filter(|id| dropped.contains(id)).count();
        clean += aug.len() - leaky.len();
        clean_kept += kept.len();
    }
    let ok = partition && once && caught == planted && clean_kept == clean;
    Ok((
        ok,
        format!("partition {partition}, each tested once {once}, planted leaks dropped {caught}/{planted}, clean rows kept {clean_kept}/{clean}"),
    ))
}

// ---------------------------------------------------------------- 8

fn sine(freq: f64, n: usize) -> Waveform {
    let x = (0..n).map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as f32).collect();
    Waveform::new(x, 16000).expect("valid sine")
}

fn peak_hz(x: &Waveform) -> f64 {
    let n = 1 << 16;
    let len = x.len() as f64;
    let mut buf: Vec<Complex<f64>> = x
        .samples()
        .iter()
        .enumerate()
        .map(|(i, &v)| Complex::new(v as f64 * (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len).cos()), 0.0))
        .collect();
    buf.resize(n, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mags: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
    let k = (1..n / 2 - 1).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap_or(1);
    let (a, b, c) = (mags[k - 1], mags[k], mags[k + 1]);
    (k as f64 + 0.5 * (a - c) / (a - 2.0 * b + c)) * 16000.0 / n as f64
}

fn c8_baselines() -> styleaug::Result<Outcome> {
    let x = sine(220.0, 16000);
    let mut speed_ok = true;
    for f in [0.8, 0.9, 1.0, 1.1, 1.25] {
        let y = speed_perturb(&x, f)?;
        speed_ok &= (y.len() as f64 - x.len() as f64 / f).abs() <= 1.0;
    }
    let peak = peak_hz(&pitch_shift(&x, 2.0)?);
    let pitch_ok = (peak - 246.9).abs() / 246.9 <= 0.02;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut additive = true;
    for i in 0..20 {
        let (na, nb) = (rng.gen_range(100..20000), rng.gen_range(100..20000));
        let a = record(&format!("a{i}"), "s", Emotion::Sad, 1);
        let b = record(&format!("b{i}"), "s", Emotion::Sad, 1);
        let y = copypaste((&a, &sine(200.0, na)), (&b, &sine(300.0, nb)))?;
        additive &= y.len() == na + nb;
    }
    Ok((
        speed_ok && pitch_ok && additive,
        format!("speed lengths {speed_ok}, +2 st peak {peak:.1} Hz, copypaste additive {additive}"),
    ))
}

// ---------------------------------------------------------------- 9

const MINORITY: Emotion = Emotion::Sad;

fn c9_trend(toy: &Toy) -> styleaug::Result<Outcome> {
    let exp = ExperimentConfig::toy();
    let cfg = ToyCorpusConfig { n_speakers: 5, cell_sizes: Some([8, 8, 8, 2]), seed: 11, ..toy_config() };
    let corpus = ToyCorpus::generate(&cfg)?;
    let manifest = corpus.manifest();
    let audio: HashMap<String, Waveform> = corpus.utterances.iter().map(|u| (u.record.utt_id.clone(), u.wave.clone())).collect();
    let mut units = HashMap::new();
    for u in &corpus.utterances {
        units.insert(u.record.utt_id.clone(), deduplicate(&quantize("", &u.wave, &toy.fe, &toy.cb)?));
    }
    let ser_fe = MelFeatures { normalize: false, ..exp.mel_features() };
    let items: Vec<SerItem> = corpus
        .utterances
        .iter()
        .map(|u| Ok(SerItem::from_record(&u.record, ser_fe.extract("", &u.wave)?)))
        .collect::<styleaug::Result<_>>()?;

    // N-times sets are nested: the first N draws of every source in the N=8 plan.
    let n_max = 8;
    let plan = build_plan(&manifest, n_max, false, exp.seed)?;
    let dir = tempfile::tempdir().map_err(|e| styleaug::Error::io(std::path::Path::new("tempdir"), e))?;
    let opts = RenderOptions { out_dir: dir.path().into(), workers: 1, seed: exp.seed, drop_truncated: false };
    let lookup = |r: &UtteranceRecord| audio.get(&r.utt_id).cloned().ok_or_else(|| styleaug::Error::Data(r.utt_id.clone()));
    let summary = render(&plan, &manifest, &units, &toy.model, &toy.vocoder, &toy.dsp, &lookup, &opts)?;
    let mut rendered = Vec::new();
    for rec in &summary.records {
        let wave = styleaug::audio::load_waveform(&dir.path().join(&rec.path), &Default::default())?;
        let draw: usize = rec.out_id.rsplit("_aug").next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
        rendered.push((draw, SerItem::from_record(&rec.to_utterance(), ser_fe.extract("", &wave)?)));
    }

    let mut reports: Vec<(usize, CvReport)> = Vec::new();
    for n in [0, 2, 4, 8] {
        let aug: Vec<SerItem> = rendered.iter().filter(|(d, _)| *d < n).map(|(_, it)| it.clone()).collect();
        reports.push((n, cross_validate(&items, &aug, &SerConfig::default(), 1)?));
    }
    let was: Vec<f64> = reports.iter().map(|(_, r)| r.mean_wa).collect();
    let inversions = was.windows(2).filter(|w| w[1] < w[0]).count();
    let recall = |r: &CvReport| r.confusion.recall(MINORITY.index()).unwrap_or(0.0);
    let base = recall(&reports[0].1);
    let best = recall(&reports[3].1);
    let curve: Vec<String> = reports
        .iter()
        .map(|(n, r)| format!("N={n} WA {:.3} UA {:.3} {MINORITY} {:.3}", r.mean_wa, r.mean_ua, recall(r)))
        .collect();
    Ok((
        inversions <= 1 && best > base,
        format!("{}; {inversions} inversions; {} rendered, {} failed", curve.join(", "), summary.records.len(), summary.failures.len()),
    ))
}
