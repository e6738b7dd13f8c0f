use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::frames::{synth_frame, SynthConfig};
use crate::model::ModelConfig;

fn brute_macro_f1(pred: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut conf = vec![vec![0usize; k]; k];
    for (&p, &y) in pred.iter().zip(labels) {
        conf[y][p] += 1;
    }
    let mut sum = 0.0;
    for c in 0..k {
        let tp = conf[c][c] as f64;
        let fp: f64 = (0..k).filter(|&r| r != c).map(|r| conf[r][c] as f64).sum();
        let fn_: f64 = (0..k).filter(|&p| p != c).map(|p| conf[c][p] as f64).sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        sum += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    sum / k as f64
}

#[test]
fn macro_f1_examples() {
    let labels = [0, 1, 2, 0, 1, 2];
    assert_eq!(macro_f1(&labels, &labels, 3), 1.0);

    // TP=2, FP=1, FN=1, TN=6 for class 1.
    let labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
    let preds = [1, 1, 0, 1, 0, 0, 0, 0, 0, 0];
    assert!((macro_f1(&preds, &labels, 2) - 16.0 / 21.0).abs() < 1e-15);

    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let preds = vec![0; 30];
    let f = macro_f1(&preds, &labels, 3);
    assert!((f - 1.0 / 6.0).abs() < 1e-15);
    assert!(f < 0.5);

    // Absent class contributes zero.
    assert!((macro_f1(&[0, 1], &[0, 1], 3) - 2.0 / 3.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn macro_f1_matches_brute_force(k in 1usize..6, pairs in prop::collection::vec((0usize..6, 0usize..6), 1..60), seed: u64) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0 % k).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1 % k).collect();
        let f = macro_f1(&pred, &labels, k);
        prop_assert!((f - brute_macro_f1(&pred, &labels, k)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&f));
        let mut idx: Vec<usize> = (0..pred.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
        let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        prop_assert!((macro_f1(&p2, &l2, k) - f).abs() < 1e-12);
    }

    #[test]
    fn stratified_counts_are_floor_or_ceil(
        labels in prop::collection::vec(0usize..4, 4..200),
        fraction in 0.01f64..1.0,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = stratified_subsample(&labels, 4, fraction, &mut rng);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        for c in 0..4 {
            let n = labels.iter().filter(|&&y| y == c).count();
            let m = idx.iter().filter(|&&i| labels[i] == c).count();
            let exact = fraction * n as f64;
            prop_assert!(m == exact.floor() as usize || m == exact.ceil() as usize, "class {c}: {m} of {n} at {fraction}");
            if n > 0 {
                prop_assert!(m >= 1);
            }
        }
    }
}

#[test]
fn full_fraction_is_identity() {
    let labels = vec![0, 1, 1, 0, 2, 2, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(stratified_subsample(&labels, 3, 1.0, &mut rng), (0..7).collect::<Vec<_>>());
}

#[test]
fn mean_std_uses_sample_variance() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
}

fn gaussian_table(n: usize, dim: usize, classes: usize, sep: f64, seed: u64) -> FeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % classes;
        let row = (0..dim)
            .map(|d| rng.sample::<f64, _>(StandardNormal) + if d == y { sep } else { 0.0 })
            .collect();
        rows.push(row);
        labels.push(y);
    }
    FeatureTable {
        backbone: "gauss".into(),
        rows,
        labels,
    }
}

fn quick_cfg() -> ProbeConfig {
    ProbeConfig {
        lr: 1e-2,
        max_epochs: 60,
        ..ProbeConfig::default()
    }
}

#[test]
fn separable_features_train_to_full_accuracy() {
    let train = gaussian_table(200, 4, 2, 12.0, 1);
    let val = gaussian_table(60, 4, 2, 12.0, 2);
    let fit = train_probe(&train, &val, 2, &quick_cfg(), 9).unwrap();
    let preds = fit.probe.predict_all(&train.rows);
    assert_eq!(preds, train.labels);
    let again = train_probe(&train, &val, 2, &quick_cfg(), 9).unwrap();
    assert_eq!(fit.probe, again.probe);
    let other = train_probe(&train, &val, 2, &quick_cfg(), 10).unwrap();
    assert_ne!(fit.probe.weight, other.probe.weight);
}

#[test]
fn missing_class_is_an_error() {
    let mut train = gaussian_table(20, 3, 3, 1.0, 1);
    train.labels.iter_mut().for_each(|y| *y = (*y).min(1));
    let val = gaussian_table(9, 3, 3, 1.0, 2);
    assert!(matches!(
        train_probe(&train, &val, 3, &quick_cfg(), 0),
        Err(EvalError::MissingClass(2))
    ));
}

#[test]
fn shuffled_labels_score_at_chance() {
    let k = 3;
    let mut train = gaussian_table(300, 6, k, 3.0, 3);
    train.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let val = {
        let mut v = gaussian_table(90, 6, k, 3.0, 5);
        v.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(6));
        v
    };
    let test = gaussian_table(300, 6, k, 3.0, 7);

    // Null distribution of macro-F1 for label-independent predictions.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let null: Vec<f64> = (0..2000)
        .map(|_| {
            let mut perm = test.labels.clone();
            perm.shuffle(&mut rng);
            macro_f1(&perm, &test.labels, k)
        })
        .collect();
    let (mu, sigma) = mean_std(&null);
    assert!((mu - 1.0 / k as f64).abs() < 0.01);

    let fit = train_probe(&train, &val, k, &quick_cfg(), 11).unwrap();
    let f = macro_f1(&fit.probe.predict_all(&test.rows), &test.labels, k);
    // A probe that has collapsed to fewer classes scores below mu; only a
    // real signal would push it above.
    assert!(f < mu + 3.0 * sigma, "f1 {f} vs null {mu} ± {sigma}");
    assert!(f > mu - 3.0 * sigma || f <= 1.0 / k as f64, "f1 {f}");
}

#[test]
fn trend_test_cases() {
    let falling = vec![vec![0.9; 5], vec![0.8; 5], vec![0.7, 0.72, 0.69, 0.7, 0.71], vec![0.5; 5]];
    assert!(trend_test(&falling).non_increasing);
    let rising = vec![vec![0.5; 5], vec![0.6; 5], vec![0.7; 5], vec![0.8; 5]];
    let r = trend_test(&rising);
    assert!(!r.non_increasing);
    assert!((r.mean_slope - 0.1).abs() < 1e-12);
    // Flat with noise passes.
    let flat = vec![
        vec![0.8, 0.81, 0.79, 0.8, 0.8],
        vec![0.81, 0.8, 0.8, 0.79, 0.8],
        vec![0.8, 0.8, 0.8, 0.8, 0.79],
        vec![0.79, 0.8, 0.8, 0.8, 0.8],
    ];
    assert!(trend_test(&flat).non_increasing);
    // A consistent bump in one step fails even with a falling overall slope.
    let bump = vec![vec![0.9; 5], vec![0.5; 5], vec![0.6; 5], vec![0.2; 5]];
    assert!(!trend_test(&bump).non_increasing);
}

#[test]
fn csv_roundtrip_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let reports = vec![
        ProbeReport::new("synth", "usjepa", 1.0, None, vec![0.9, 0.8, 0.85, 0.87, 0.88]),
        ProbeReport::new("synth", "random", 0.05, None, vec![0.4, 0.5, 0.45, 0.41, 0.42]),
        ProbeReport::new(
            "synth",
            "usjepa",
            1.0,
            Some((crate::corruption::CorruptionKind::Blur, 2)),
            vec![0.7; 5],
        ),
    ];
    let path = dir.path().join("r.csv");
    write_reports_csv(&path, &reports).unwrap();
    let back = read_reports_csv(&path).unwrap();
    assert_eq!(back, reports);
    let summary = summary_markdown(&reports);
    assert!(summary.contains("| usjepa | 0.860 ± 0.038 |"), "{summary}");
    assert!(!summary.contains("random"));
    assert_eq!(reports_markdown(&reports).lines().count(), 5);
}

fn tiny_frames(n: usize) -> Vec<crate::data::PreparedFrame> {
    let cfg = SynthConfig {
        height: 32,
        width: 32,
        ..SynthConfig::default()
    };
    (0..n)
        .map(|i| {
            let s = synth_frame(i % 3, 100 + i as u64, &cfg).unwrap();
            crate::data::PreparedFrame {
                frame: s.frame,
                region: s.region,
                label: Some(s.label),
                notes: Vec::new(),
            }
        })
        .collect()
}

fn tiny_stack() -> ModelStack<f32> {
    let mut cfg = ModelConfig::desk();
    cfg.encoder.embed_dim = 16;
    cfg.encoder.depth = 1;
    cfg.encoder.heads = 2;
    cfg.predictor.embed_dim = 8;
    cfg.predictor.depth = 1;
    cfg.predictor.heads = 2;
    cfg.predictor.target_dim = 16;
    ModelStack::new(&cfg, 3).unwrap()
}

#[test]
fn features_are_deterministic_and_row_aligned() {
    let stack = tiny_stack();
    let mut frames = tiny_frames(5);
    frames.push(frames[2].clone());
    let a = extract_features(&stack, "tiny", &frames, 2).unwrap();
    let b = extract_features(&stack, "tiny", &frames, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dim(), 16);
    assert_eq!(a.rows[5], a.rows[2]);
    assert_eq!(a.labels, vec![0, 1, 2, 0, 1, 2]);
}

#[test]
fn sweeps_have_expected_shape_and_identities() {
    let stack = tiny_stack();
    let digest = stack.params_digest();
    let frames = tiny_frames(36);
    let table = extract_features(&stack, "tiny", &frames, 1).unwrap();
    let task = TaskFeatures {
        task: "synth".into(),
        classes: 3,
        train: table.subset(&(0..24).collect::<Vec<_>>()),
        val: table.subset(&(24..30).collect::<Vec<_>>()),
        test: table.subset(&(30..36).collect::<Vec<_>>()),
    };
    let cfg = ProbeConfig {
        max_epochs: 5,
        ..ProbeConfig::default()
    };
    let plain = probe_scores(&task, &cfg, 77).unwrap();
    assert_eq!(plain.len(), 5);

    let curve = fewshot_curve(&task, &[0.25, 1.0], &cfg, 77).unwrap();
    assert_eq!(curve.len(), 2);
    assert_eq!(curve[1].scores, plain);
    assert!(curve.iter().all(|r| r.scores.len() == 5));

    let sweep = robustness_sweep(&stack, &task, &frames[30..], &CorruptionKind::ALL, &cfg, 77, 1).unwrap();
    assert_eq!(sweep.len(), 3 * 4);
    for r in &sweep {
        assert_eq!(r.scores.len(), 5);
        if r.corruption.unwrap().1 == 0 {
            assert_eq!(r.scores, plain);
        }
    }
    assert_eq!(stack.params_digest(), digest);
}
