use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use styleaug::audio::{load_waveform, mel_spectrogram, MelSpectrogram, write_wav, Vocoder, WavReadOptions};
use styleaug::augment::{self, build_plan, load_aug_manifest, render, render_baseline, BaselineMethod, RenderOptions};
use styleaug::config::ExperimentConfig;
use styleaug::corpus::{Manifest, UtteranceRecord};
use styleaug::io::{read_jsonl, write_atomic, write_jsonl};
use styleaug::model::{DecodeMode, StyleTransferModel};
use styleaug::pipeline::{self, RunReport};
use styleaug::quantize::{load_units, save_units, KMeansCodebook, UnitSequence};
use styleaug::ser::{self, CvReport, SerClassifier, TrainedFold};
use styleaug::toy::ToyCorpus;
use styleaug::train::{finetune, pretrain_labels, pretrain_style, split_validation, Trainer};
use styleaug::{Error, Result};

#[derive(Parser)]
#[command(name = "styleaug", version, about = "Style-swap data augmentation for speech emotion recognition")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the small toy-scale settings as the base configuration.
    #[arg(long, global = true)]
    toy: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic toy corpus.
    ToyGen(ToyGen),
    /// Fit the k-means unit codebook.
    QuantizeFit(QuantizeFit),
    /// Write deduplicated unit sequences for a manifest.
    Quantize(Quantize),
    /// Train the style-transfer model from scratch.
    Train(Train),
    /// Fine-tune a trained model on another corpus.
    Finetune(Finetune),
    /// Re-synthesize one utterance in the style of a reference recording.
    Transfer(Transfer),
    /// Build an augmentation plan and render it.
    Augment(Augment),
    /// Augment with CopyPaste, speed perturbation or pitch shift.
    BaselineAug(BaselineAug),
    /// Train one emotion classifier per session fold.
    SerTrain(SerTrain),
    /// Evaluate fold classifiers and write WA/UA tables and confusion plots.
    SerEval(SerEval),
    /// Compare several evaluation runs.
    Report(Report),
}

#[derive(Args)]
struct ToyGen {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    per_cell: Option<usize>,
    /// Per-emotion cell sizes (angry,happy,neutral,sad) to induce imbalance.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    cell_sizes: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct QuantizeFit {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct Quantize {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Existing codebook; a new one is fitted and saved next to `out` otherwise.
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_iters: Option<u64>,
}

#[derive(Args)]
struct Finetune {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct Transfer {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    units: PathBuf,
    /// Utterance id whose content is kept.
    #[arg(long)]
    source: String,
    /// Recording whose style is applied.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Augment {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    balance: bool,
    #[arg(long)]
    drop_truncated: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Copypaste,
    Speed,
    Pitch,
}

#[derive(Args)]
struct BaselineAug {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    /// Outputs per utterance.
    #[arg(long, default_value_t = 1)]
    n: usize,
}

#[derive(Args)]
struct SerTrain {
    #[arg(long)]
    manifest: PathBuf,
    /// Augmented-corpus manifests added to each fold's training split.
    #[arg(long)]
    aug: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SerEval {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory written by `ser-train`.
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// An earlier `ser-eval` output directory to compare per-class recall against.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct Report {
    /// `label=dir` pairs of `ser-eval` outputs; the first is the reference.
    #[arg(long = "run", required = true)]
    runs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None if cli.toy => Ok(ExperimentConfig::toy()),
        None => Ok(ExperimentConfig::default()),
    }
}

fn units_map(path: &Path) -> Result<HashMap<String, UnitSequence>> {
    Ok(load_units(path)?.into_iter().collect())
}

fn check_units(units: &HashMap<String, UnitSequence>, k: usize) -> Result<()> {
    for (id, u) in units {
        u.validate(k).map_err(|e| Error::Config(format!("{id}: {e} (model vocabulary {k})")))?;
    }
    Ok(())
}

fn parent(p: &Path) -> &Path {
    p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn toy_gen(cfg: &ExperimentConfig, a: &ToyGen) -> Result<()> {
    let mut toy = cfg.toy.clone();
    if let Some(n) = a.speakers {
        toy.n_speakers = n;
    }
    if let Some(n) = a.per_cell {
        toy.n_per_cell = n;
    }
    if let Some(c) = &a.cell_sizes {
        toy.cell_sizes = Some([c[0], c[1], c[2], c[3]]);
    }
    toy.seed = a.seed.unwrap_or(cfg.seed);
    let corpus = ToyCorpus::generate(&toy)?;
    corpus.write(&a.out)?;
    let mut r = RunReport::new("toy-gen", cfg).output("manifest", &a.out.join("manifest.jsonl"));
    r.summary = serde_json::json!({ "utterances": corpus.len(), "class_counts": corpus.manifest().class_counts(), "toy": toy });
    println!("{} utterances -> {}", corpus.len(), a.out.display());
    r.write(&a.out)
}

fn fit_codebook(cfg: &ExperimentConfig, manifest: &Path, k: Option<usize>, workers: usize) -> Result<KMeansCodebook> {
    let m = Manifest::load(manifest)?;
    let fe = pipeline::unit_extractor(cfg);
    let feats = pipeline::extract(m.records(), fe.as_ref(), &cfg.dsp, workers)?;
    let mut kc = cfg.quantizer.clone();
    if let Some(k) = k {
        kc.k = k;
    }
    if kc.k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    pipeline::fit_quantizer(&feats, &kc)
}

fn quantize_fit(cfg: &ExperimentConfig, a: &QuantizeFit, workers: usize) -> Result<()> {
    let cb = fit_codebook(cfg, &a.manifest, a.k, workers)?;
    cb.save(&a.out)?;
    println!("codebook k={} dim={} -> {}", cb.k(), cb.feature_dim(), a.out.display());
    let mut r = RunReport::new("quantize-fit", cfg).input("manifest", &a.manifest).output("codebook", &a.out);
    r.summary = serde_json::json!({ "k": cb.k(), "dim": cb.feature_dim() });
    r.write(parent(&a.out))
}

fn quantize(cfg: &ExperimentConfig, a: &Quantize, workers: usize) -> Result<()> {
    let cb = match &a.codebook {
        Some(p) => KMeansCodebook::load(p)?,
        None => {
            let cb = fit_codebook(cfg, &a.manifest, a.k, workers)?;
            cb.save(&parent(&a.out).join("codebook.bin"))?;
            cb
        }
    };
    let m = Manifest::load(&a.manifest)?;
    let fe = pipeline::unit_extractor(cfg);
    let feats = pipeline::extract(m.records(), fe.as_ref(), &cfg.dsp, workers)?;
    let units = pipeline::quantize_all(m.records(), &feats, &cb)?;
    save_units(&a.out, &units)?;
    let mean = units.iter().map(|(_, u)| u.len()).sum::<usize>() as f64 / units.len().max(1) as f64;
    println!("{} sequences, {mean:.1} units each on average -> {}", units.len(), a.out.display());
    let mut r = RunReport::new("quantize", cfg).input("manifest", &a.manifest).output("units", &a.out);
    r.summary = serde_json::json!({ "k": cb.k(), "sequences": units.len(), "mean_len": mean });
    r.write(parent(&a.out))
}

fn fit_report(cmd: &str, cfg: &ExperimentConfig, out: &Path, rep: &styleaug::train::FitReport) -> Result<()> {
    let mut r = RunReport::new(cmd, cfg).output("checkpoint", &out.join("model.ckpt"));
    r.summary = serde_json::json!({
        "stop": format!("{:?}", rep.stop),
        "epochs": rep.state.epoch,
        "iterations": rep.state.iteration,
        "best_val": rep.state.best_val,
    });
    println!("{cmd}: {:?} after {} epochs, best validation loss {:?}", rep.stop, rep.state.epoch, rep.state.best_val);
    r.write(out)
}

fn train(cfg: &ExperimentConfig, a: &Train, workers: usize) -> Result<()> {
    let m = Manifest::load(&a.manifest)?;
    let units = units_map(&a.units)?;
    check_units(&units, cfg.model.vocab)?;
    let items = pipeline::train_items(m.records(), &units, &cfg.dsp, workers)?;
    let mut tc = cfg.train.clone();
    if let Some(e) = a.epochs {
        tc.max_epochs = e;
    }
    if a.max_iters.is_some() {
        tc.max_iters = a.max_iters;
    }
    let (tr, val, fallback) = split_validation(&items, tc.val_size, tc.val_fraction, tc.seed);
    if fallback {
        log::warn!("holding out {} of {} utterances for validation", val.len(), items.len());
    }
    if tr.is_empty() || val.is_empty() {
        return Err(Error::Data("training needs at least two utterances".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut model = StyleTransferModel::new(cfg.model.clone(), cfg.seed)?;
    if cfg.pretrain.epochs > 0 {
        let recs: Vec<&UtteranceRecord> = tr.iter().filter_map(|it| m.get(&it.utt_id)).collect();
        let (labels, n_classes) = pretrain_labels(&recs, cfg.pretrain.target);
        let labelled: Vec<(usize, &MelSpectrogram)> = labels.into_iter().zip(tr.iter().map(|it| &it.mel)).collect();
        let r = pretrain_style(&mut model, &labelled, n_classes, &cfg.pretrain)?;
        log::info!("style pretraining: {n_classes} classes, loss {:.4}, accuracy {:.3}", r.final_loss, r.train_accuracy);
    }
    let mut t = Trainer::new(model, tc)?;
    t.checkpoint_dir = Some(a.out.clone());
    let rep = t.fit(&tr, &val, |s, tl, vl| log::info!("epoch {} iter {} train {tl:.4} val {vl:.4}", s.epoch, s.iteration))?;
    t.into_model().save(&a.out.join("model.ckpt"), serde_json::json!({ "config_hash": cfg.hash(), "seed": cfg.seed }))?;
    fit_report("train", cfg, &a.out, &rep)
}

fn finetune_cmd(cfg: &ExperimentConfig, a: &Finetune, workers: usize) -> Result<()> {
    let (model, _) = StyleTransferModel::load(&a.checkpoint)?;
    let m = Manifest::load(&a.manifest)?;
    let units = units_map(&a.units)?;
    check_units(&units, model.cfg.vocab)?;
    let items = pipeline::train_items(m.records(), &units, &cfg.dsp, workers)?;
    let mut tc = cfg.train.clone();
    if let Some(e) = a.epochs {
        tc.max_epochs = e;
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (model, rep) = finetune(model, &items, &tc, Some(&a.out))?;
    model.save(&a.out.join("model.ckpt"), serde_json::json!({ "config_hash": cfg.hash(), "seed": cfg.seed, "finetuned_from": a.checkpoint }))?;
    fit_report("finetune", cfg, &a.out, &rep)
}

fn transfer(cfg: &ExperimentConfig, a: &Transfer) -> Result<()> {
    let (model, _) = StyleTransferModel::load(&a.checkpoint)?;
    let units = units_map(&a.units)?;
    let u = units.get(&a.source).ok_or_else(|| Error::Config(format!("no units for '{}' in {}", a.source, a.units.display())))?;
    let reference = load_waveform(&a.reference, &WavReadOptions { sample_rate: cfg.dsp.sample_rate, ..Default::default() })?;
    let mel = mel_spectrogram(&reference, &cfg.dsp)?;
    let style = model.encode_style(&mel, &a.reference.display().to_string())?;
    let decoded = model.decode_sequence(u, &style, DecodeMode::FreeRunning { max_frames: None }, &cfg.dsp, cfg.seed)?;
    let wave = cfg.vocoder().vocode(&decoded.mel)?;
    write_wav(&a.out, &wave)?;
    println!("{} frames ({:.2} s){} -> {}", decoded.mel.n_frames(), wave.duration_secs(), if decoded.truncated { ", truncated" } else { "" }, a.out.display());
    let mut r = RunReport::new("transfer", cfg).input("reference", &a.reference).output("wav", &a.out);
    r.summary = serde_json::json!({ "source": a.source, "frames": decoded.mel.n_frames(), "truncated": decoded.truncated });
    r.write(parent(&a.out))
}

fn augment_cmd(cfg: &ExperimentConfig, a: &Augment, workers: usize) -> Result<()> {
    let (model, _) = StyleTransferModel::load(&a.checkpoint)?;
    let m = Manifest::load(&a.manifest)?;
    let units = units_map(&a.units)?;
    check_units(&units, model.cfg.vocab)?;
    let n = a.n.unwrap_or(cfg.augment.n);
    let balance = a.balance || cfg.augment.balance;
    let plan = build_plan(&m, n, balance, cfg.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_jsonl(&a.out.join("plan.jsonl"), &plan.rows)?;
    let opts = RenderOptions { out_dir: a.out.clone(), workers, seed: cfg.seed, drop_truncated: a.drop_truncated || cfg.augment.drop_truncated };
    let vocoder = cfg.vocoder();
    let dsp = cfg.dsp.clone();
    let audio = move |r: &UtteranceRecord| pipeline::load_audio(r, &dsp);
    let summary = render(&plan, &m, &units, &model, &vocoder, &cfg.dsp, &audio, &opts)?;
    println!(
        "{} rows planned, {} rendered, {} failed, {} truncated dropped -> {}",
        plan.rows.len(),
        summary.records.len(),
        summary.failures.len(),
        summary.dropped_truncated,
        a.out.display()
    );
    let mut r = RunReport::new("augment", cfg).input("manifest", &a.manifest).output("manifest", &a.out.join("manifest.jsonl"));
    r.summary = serde_json::json!({
        "n": n, "balance": balance, "quotas": plan.quotas, "planned": plan.rows.len(),
        "rendered": summary.records.len(), "failures": summary.failures, "skipped_sources": plan.skipped,
        "dropped_truncated": summary.dropped_truncated,
    });
    r.write(&a.out)?;
    if summary.records.is_empty() && !plan.rows.is_empty() {
        return Err(Error::Data("every plan row failed to render".into()));
    }
    Ok(())
}

fn baseline_aug(cfg: &ExperimentConfig, a: &BaselineAug) -> Result<()> {
    let m = Manifest::load(&a.manifest)?;
    let mut spec = cfg.baseline.clone();
    spec.method = match a.method {
        Method::Copypaste => BaselineMethod::Copypaste,
        Method::Speed => BaselineMethod::Speed,
        Method::Pitch => BaselineMethod::Pitch,
    };
    let opts = RenderOptions { out_dir: a.out.clone(), workers: 1, seed: cfg.seed, drop_truncated: false };
    let dsp = cfg.dsp.clone();
    let audio = move |r: &UtteranceRecord| pipeline::load_audio(r, &dsp);
    let summary = render_baseline(&m, &spec, a.n, &audio, &opts)?;
    println!("{} rendered, {} failed -> {}", summary.records.len(), summary.failures.len(), a.out.display());
    let mut r = RunReport::new("baseline-aug", cfg).input("manifest", &a.manifest).output("manifest", &a.out.join("manifest.jsonl"));
    r.summary = serde_json::json!({ "spec": spec, "n": a.n, "rendered": summary.records.len(), "failures": summary.failures });
    r.write(&a.out)
}

fn aug_records(paths: &[PathBuf]) -> Result<Vec<UtteranceRecord>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_aug_manifest(p)?.iter().map(|r| r.to_utterance()));
    }
    Ok(out)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct FoldEntry {
    fold: ser::FoldSpec,
    checkpoint: String,
    n_train: usize,
    n_aug: usize,
    dropped_aug: usize,
    epochs: usize,
}

fn ser_train(cfg: &ExperimentConfig, a: &SerTrain, workers: usize) -> Result<()> {
    let m = Manifest::load(&a.manifest)?;
    let fe = pipeline::ser_extractor(cfg);
    let items = pipeline::ser_items(m.records(), fe.as_ref(), &cfg.dsp, workers)?;
    let aug = pipeline::ser_items(&aug_records(&a.aug)?, fe.as_ref(), &cfg.dsp, workers)?;
    let trained = ser::train_folds(&items, &aug, &cfg.ser, workers)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut entries = Vec::new();
    for (i, t) in trained.iter().enumerate() {
        let name = format!("fold{}.ckpt", i + 1);
        t.classifier.save(&a.out.join(&name), serde_json::json!({ "config_hash": cfg.hash(), "seed": cfg.seed }))?;
        println!("fold {} (test session {}): {} train rows, {} generated, {} dropped, {} epochs", i + 1, t.fold.test, t.n_train, t.n_aug, t.dropped_aug, t.epochs);
        entries.push(FoldEntry { fold: t.fold.clone(), checkpoint: name, n_train: t.n_train, n_aug: t.n_aug, dropped_aug: t.dropped_aug, epochs: t.epochs });
    }
    write_jsonl(&a.out.join("folds.jsonl"), &entries)?;
    let mut r = RunReport::new("ser-train", cfg).input("manifest", &a.manifest).output("folds", &a.out.join("folds.jsonl"));
    r.summary = serde_json::json!({ "utterances": items.len(), "generated": aug.len(), "aug_manifests": a.aug });
    r.write(&a.out)
}

fn load_cv(dir: &Path) -> Result<CvReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(serde_json::from_value(v["report"].clone())?)
}

fn ser_eval(cfg: &ExperimentConfig, a: &SerEval, workers: usize) -> Result<()> {
    let m = Manifest::load(&a.manifest)?;
    let entries: Vec<FoldEntry> = read_jsonl(&a.models.join("folds.jsonl"))?;
    let trained = entries
        .iter()
        .map(|e| {
            let (classifier, _) = SerClassifier::load(&a.models.join(&e.checkpoint))?;
            Ok(TrainedFold { fold: e.fold.clone(), classifier, n_train: e.n_train, n_aug: e.n_aug, dropped_aug: e.dropped_aug, epochs: e.epochs })
        })
        .collect::<Result<Vec<_>>>()?;
    let fe = pipeline::ser_extractor(cfg);
    let items = pipeline::ser_items(m.records(), fe.as_ref(), &cfg.dsp, workers)?;
    let report = ser::evaluate_folds(&items, &trained)?;
    let baseline = a.baseline.as_deref().map(load_cv).transpose()?;
    let meta = serde_json::json!({ "config_hash": cfg.hash(), "seed": cfg.seed, "models": a.models });
    ser::write_report(&a.out, &report, baseline.as_ref(), meta)?;
    for (i, f) in report.folds.iter().enumerate() {
        println!("fold {}: WA {:.4} UA {:.4}", i + 1, f.eval.scores.wa, f.eval.scores.ua);
    }
    println!("mean WA {:.4} UA {:.4} -> {}", report.mean_wa, report.mean_ua, a.out.display());
    let mut r = RunReport::new("ser-eval", cfg).input("models", &a.models).output("report", &a.out.join("report.json"));
    r.summary = serde_json::json!({ "mean_wa": report.mean_wa, "mean_ua": report.mean_ua });
    r.write(&a.out)
}

fn report_cmd(cfg: &ExperimentConfig, a: &Report) -> Result<()> {
    let mut runs = Vec::new();
    for spec in &a.runs {
        let (label, dir) = spec.split_once('=').ok_or_else(|| Error::Config(format!("--run expects label=dir, got '{spec}'")))?;
        runs.push((label.to_string(), load_cv(Path::new(dir))?));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut csv = String::from("run,mean_wa,mean_ua,recall_angry,recall_happy,recall_neutral,recall_sad\n");
    for (label, r) in &runs {
        let rec: Vec<String> = (0..4).map(|c| r.confusion.recall(c).map(|x| format!("{x:.4}")).unwrap_or_default()).collect();
        csv.push_str(&format!("{label},{:.4},{:.4},{}\n", r.mean_wa, r.mean_ua, rec.join(",")));
        println!("{label:>12}  WA {:.4}  UA {:.4}", r.mean_wa, r.mean_ua);
    }
    write_atomic(&a.out.join("summary.csv"), csv.as_bytes())?;
    let base = &runs[0];
    let mut deltas = String::from("run,class,reference_recall,recall,delta\n");
    for (label, r) in runs.iter().skip(1) {
        for d in ser::recall_deltas(&base.1, r) {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
            deltas.push_str(&format!("{label},{},{},{},{}\n", d.class, f(d.baseline), f(d.augmented), f(d.delta)));
        }
    }
    write_atomic(&a.out.join("recall_deltas.csv"), deltas.as_bytes())?;
    let mut r = RunReport::new("report", cfg).output("summary", &a.out.join("summary.csv"));
    r.summary = serde_json::json!({ "runs": runs.iter().map(|(l, _)| l).collect::<Vec<_>>() });
    r.write(&a.out)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let workers = augment::workers_from_env()?;
    match &cli.cmd {
        Cmd::ToyGen(a) => toy_gen(&cfg, a),
        Cmd::QuantizeFit(a) => quantize_fit(&cfg, a, workers),
        Cmd::Quantize(a) => quantize(&cfg, a, workers),
        Cmd::Train(a) => train(&cfg, a, workers),
        Cmd::Finetune(a) => finetune_cmd(&cfg, a, workers),
        Cmd::Transfer(a) => transfer(&cfg, a),
        Cmd::Augment(a) => augment_cmd(&cfg, a, workers),
        Cmd::BaselineAug(a) => baseline_aug(&cfg, a),
        Cmd::SerTrain(a) => ser_train(&cfg, a, workers),
        Cmd::SerEval(a) => ser_eval(&cfg, a, workers),
        Cmd::Report(a) => report_cmd(&cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::Param(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
