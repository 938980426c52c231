use std::collections::HashMap;

use styleaug::audio::{load_waveform, GriffinLim, WavReadOptions};
use styleaug::augment::{build_plan, load_aug_manifest, render, validate_plan, RenderOptions};
use styleaug::config::ExperimentConfig;
use styleaug::corpus::{Manifest, UtteranceRecord};
use styleaug::model::StyleTransferModel;
use styleaug::pipeline;
use styleaug::quantize::{load_units, save_units};
use styleaug::ser::{leakage_guard, make_folds, SerItem};
use styleaug::toy::{ToyCorpus, ToyCorpusConfig};
use styleaug::train::{split_validation, TrainConfig, Trainer};

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy();
    cfg.toy = ToyCorpusConfig { n_speakers: 5, n_per_cell: 2, ..Default::default() };
    cfg.vocoder.n_iters = 4;
    cfg.vocoder.nnls_iters = 10;
    cfg
}

#[test]
fn toy_corpus_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let corpus = ToyCorpus::generate(&cfg.toy).unwrap();
    corpus.write(dir.path()).unwrap();
    let m = Manifest::load(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(m.len(), corpus.len());
    assert_eq!(m.sessions(), vec![1, 2, 3, 4, 5]);
    let rec = &m.records()[3];
    let wave = pipeline::load_audio(rec, &cfg.dsp).unwrap();
    let orig = &corpus.get(&rec.utt_id).unwrap().wave;
    assert_eq!(wave.len(), orig.len());
    let err = wave.samples().iter().zip(orig.samples()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err < 1e-3, "16-bit round trip error {err}");
}

#[test]
fn library_pipeline_from_audio_to_leak_free_ser_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let corpus = ToyCorpus::generate(&cfg.toy).unwrap();
    corpus.write(dir.path()).unwrap();
    let m = Manifest::load(&dir.path().join("manifest.jsonl")).unwrap();
    let records: Vec<UtteranceRecord> = m
        .records()
        .iter()
        .map(|r| UtteranceRecord { path: dir.path().join(&r.path), ..r.clone() })
        .collect();

    let fe = pipeline::unit_extractor(&cfg);
    let feats = pipeline::extract(&records, fe.as_ref(), &cfg.dsp, 2).unwrap();
    let cb = pipeline::fit_quantizer(&feats, &cfg.quantizer).unwrap();
    let units = pipeline::quantize_all(&records, &feats, &cb).unwrap();
    assert!(units.iter().all(|(_, u)| u.deduped && u.validate(cfg.quantizer.k).is_ok()));
    let store = dir.path().join("units.jsonl");
    save_units(&store, &units).unwrap();
    let units: HashMap<_, _> = load_units(&store).unwrap().into_iter().collect();

    let items = pipeline::train_items(&records, &units, &cfg.dsp, 2).unwrap();
    let (tr, val, _) = split_validation(&items, 1000, 0.1, 0);
    let model = StyleTransferModel::new(cfg.model.clone(), 0).unwrap();
    let mut t = Trainer::new(model, TrainConfig { max_iters: Some(2), batch_size: 8, ..cfg.train.clone() }).unwrap();
    let rep = t.fit(&tr, &val, |_, _, _| {}).unwrap();
    assert_eq!(rep.state.iteration, 2);
    let model = t.into_model();

    let manifest = Manifest::new(records.clone()).unwrap();
    let plan = build_plan(&manifest, 1, false, 0).unwrap();
    validate_plan(&plan, &manifest).unwrap();
    let out = dir.path().join("aug");
    let opts = RenderOptions { out_dir: out.clone(), workers: 2, seed: 0, drop_truncated: false };
    let vocoder = GriffinLim { n_iters: 4, nnls_iters: 10, ..GriffinLim::default() };
    let audio = |r: &UtteranceRecord| pipeline::load_audio(r, &cfg.dsp);
    // An untrained decoder runs to its frame cap; keep the render small.
    let small = styleaug::augment::AugmentationPlan { rows: plan.rows[..6].to_vec(), ..plan.clone() };
    let summary = render(&small, &manifest, &units, &model, &vocoder, &cfg.dsp, &audio, &opts).unwrap();
    assert!(summary.failures.is_empty(), "{:?}", summary.failures);
    let aug = load_aug_manifest(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(aug.len(), 6);
    let wave = load_waveform(&aug[0].path, &WavReadOptions::default()).unwrap();
    assert!(!wave.is_empty());

    let ser_fe = pipeline::ser_extractor(&cfg);
    let aug_rows: Vec<SerItem> = aug
        .iter()
        .map(|a| {
            let rec = a.to_utterance();
            let w = load_waveform(&a.path, &WavReadOptions::default()).unwrap();
            SerItem::from_record(&rec, ser_fe.extract(&rec.utt_id, &w).unwrap())
        })
        .collect();
    assert!(aug_rows.iter().all(|r| r.derived_from.len() == 2));
    let session_of: HashMap<String, u32> = records.iter().map(|r| (r.utt_id.clone(), r.session)).collect();
    for fold in make_folds(&manifest.sessions()).unwrap() {
        let (kept, dropped) = leakage_guard(&aug_rows, &fold, &session_of);
        assert_eq!(kept.len() + dropped.len(), aug_rows.len());
        assert!(kept.iter().all(|r| fold.train.contains(&r.session)));
    }
}
