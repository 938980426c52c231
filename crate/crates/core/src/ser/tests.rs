use super::*;
use proptest::prelude::*;

fn item(id: &str, emotion: Emotion, session: u32, level: f64, from: &[&str]) -> SerItem {
    let data: Vec<f64> = (0..12).map(|i| level + 0.01 * i as f64).collect();
    SerItem {
        utt_id: id.into(),
        emotion,
        session,
        derived_from: from.iter().map(|s| s.to_string()).collect(),
        features: FeatureMatrix::new(4, 3, data).unwrap(),
    }
}

#[test]
fn five_folds_rotate_sessions() {
    let f = make_folds(&[5, 3, 1, 2, 4]).unwrap();
    assert_eq!(f.len(), 5);
    assert_eq!(f[0], FoldSpec { test: 1, validation: 2, train: vec![3, 4, 5] });
    assert_eq!(f[4], FoldSpec { test: 5, validation: 1, train: vec![2, 3, 4] });
    for fold in &f {
        assert!(!fold.train.contains(&fold.test) && !fold.train.contains(&fold.validation));
    }
    assert!(matches!(make_folds(&[1, 2, 3, 4]), Err(Error::Config(_))));
    assert!(matches!(make_folds(&[1, 1, 2, 3, 4]), Err(Error::Config(_))));
}

#[test]
fn guard_drops_rows_touching_held_out_sessions() {
    let fold = make_folds(&[1, 2, 3, 4, 5]).unwrap().remove(0);
    let session_of: HashMap<String, u32> =
        [("a", 3), ("b", 4), ("t", 1), ("v", 2)].iter().map(|(k, s)| (k.to_string(), *s)).collect();
    let aug = vec![
        item("ok", Emotion::Sad, 3, 0.0, &["a", "b"]),
        item("src_test", Emotion::Sad, 3, 0.0, &["t", "a"]),
        item("ref_val", Emotion::Sad, 3, 0.0, &["a", "v"]),
        item("unknown", Emotion::Sad, 3, 0.0, &["zz"]),
        item("orphan", Emotion::Sad, 3, 0.0, &[]),
    ];
    let (kept, dropped) = leakage_guard(&aug, &fold, &session_of);
    assert_eq!(kept.iter().map(|k| k.utt_id.as_str()).collect::<Vec<_>>(), vec!["ok"]);
    assert_eq!(dropped.len(), 4);
}

fn separable(n_per: usize) -> Vec<SerItem> {
    let mut v = Vec::new();
    for s in 1..=5 {
        for (c, e) in Emotion::ALL.iter().enumerate() {
            for k in 0..n_per {
                v.push(item(&format!("s{s}_{c}_{k}"), *e, s, c as f64 * 2.0 + 0.1 * k as f64, &[]));
            }
        }
    }
    v
}

#[test]
fn classifier_learns_separable_classes() {
    let items = separable(3);
    let cfg = SerConfig { backbone_lr: 1e-2, head_lr: 5e-2, hidden: 8, max_epochs: 150, patience: 150, ..Default::default() };
    let rep = cross_validate(&items, &[], &cfg, 2).unwrap();
    assert_eq!(rep.folds.len(), 5);
    assert!(rep.mean_wa > 0.9, "wa {}", rep.mean_wa);
    assert_eq!(rep.confusion.total(), items.len() as u64);
}

#[test]
fn parallel_and_serial_folds_agree() {
    let items = separable(2);
    let cfg = SerConfig { backbone: BackboneMode::Frozen, head_lr: 1e-2, max_epochs: 20, ..Default::default() };
    let a = cross_validate(&items, &[], &cfg, 1).unwrap();
    let b = cross_validate(&items, &[], &cfg, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn backbone_and_head_groups_get_their_rates() {
    let norm = Standardizer { mean: vec![0.0; 3], std: vec![1.0; 3] };
    let clf = SerClassifier::new(SerConfig::default(), 3, norm).unwrap();
    assert_eq!(clf.lr(ParamGroup::Backbone), 1e-5);
    assert_eq!(clf.lr(ParamGroup::Head), 1e-4);
    let groups: HashSet<ParamGroup> = clf.store.entries().iter().map(|p| p.group).collect();
    assert_eq!(groups, [ParamGroup::Backbone, ParamGroup::Head].into_iter().collect());
}

#[test]
fn augmented_rows_join_training_only() {
    let items = separable(2);
    let aug: Vec<SerItem> = (0..6).map(|i| item(&format!("g{i}"), Emotion::Sad, 3, 6.0, &["s3_3_0", "s3_3_1"])).collect();
    let cfg = SerConfig { backbone: BackboneMode::Frozen, head_lr: 1e-2, max_epochs: 5, ..Default::default() };
    let rep = cross_validate(&items, &aug, &cfg, 1).unwrap();
    for f in &rep.folds {
        let expect = if f.fold.train.contains(&3) { 6 } else { 0 };
        assert_eq!(f.n_aug, expect);
        assert_eq!(f.n_aug + f.dropped_aug, 6);
        assert_eq!(f.eval.confusion.total(), 8);
    }
}

#[test]
fn report_files_are_written() {
    let items = separable(2);
    let cfg = SerConfig { backbone: BackboneMode::Frozen, max_epochs: 3, ..Default::default() };
    let rep = cross_validate(&items, &[], &cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &rep, Some(&rep), serde_json::json!({"seed": 0})).unwrap();
    for f in ["folds.csv", "confusion.csv", "confusion.png", "report.json", "recall_deltas.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let deltas = std::fs::read_to_string(dir.path().join("recall_deltas.csv")).unwrap();
    assert!(deltas.lines().skip(1).all(|l| l.ends_with(",0.0000")));
    assert_eq!(std::fs::read_to_string(dir.path().join("folds.csv")).unwrap().lines().count(), 7);
}

#[test]
fn classifier_checkpoint_round_trip() {
    let items = separable(2);
    let cfg = SerConfig { hidden: 4, max_epochs: 3, ..Default::default() };
    let trained = train_folds(&items, &[], &cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fold1.ckpt");
    trained[0].classifier.save(&path, serde_json::json!({"fold": 1})).unwrap();
    let (back, extra) = SerClassifier::load(&path).unwrap();
    assert_eq!(extra["fold"], 1);
    let all: Vec<&SerItem> = items.iter().collect();
    assert_eq!(back.predict(&all).unwrap(), trained[0].classifier.predict(&all).unwrap());
}

#[test]
fn standardizer_uses_training_stats() {
    let mut a = item("a", Emotion::Angry, 1, 0.0, &[]);
    let mut b = item("b", Emotion::Angry, 1, 0.0, &[]);
    a.features = FeatureMatrix::new(2, 1, vec![0.0, 0.0]).unwrap();
    b.features = FeatureMatrix::new(2, 1, vec![2.0, 2.0]).unwrap();
    let s = Standardizer::fit(&[&a, &b]).unwrap();
    assert!((s.mean[0] - 1.0).abs() < 1e-12);
    assert!((s.std[0] - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn folds_partition_sessions(mut s in proptest::sample::subsequence((1u32..20).collect::<Vec<_>>(), 5)) {
        s.reverse();
        let folds = make_folds(&s).unwrap();
        let mut tests: Vec<u32> = folds.iter().map(|f| f.test).collect();
        tests.sort_unstable();
        let mut sorted = s.clone();
        sorted.sort_unstable();
        prop_assert_eq!(&tests, &sorted);
        for f in &folds {
            let mut all = f.train.clone();
            all.push(f.test);
            all.push(f.validation);
            all.sort_unstable();
            prop_assert_eq!(&all, &sorted);
        }
    }
}
