use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use usjepa::config::RunConfig;
use usjepa::eval::{write_reports_csv, ProbeReport};
use usjepa::sampling::DatasetManifest;

fn usjepa(args: &[&str], paths: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_usjepa"));
    cmd.args(args).env("RUST_LOG", "warn");
    for p in paths {
        cmd.arg(p);
    }
    cmd.output().expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let desk = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut cfg = RunConfig::load(&desk).unwrap();
    cfg.corpus.synthetic_count = 24;
    cfg.eval.task.synthetic_train = 12;
    cfg.eval.task.synthetic_val = 6;
    cfg.eval.task.synthetic_test = 6;
    cfg.optimizer.total_epochs = 1.0;
    cfg.optimizer.warmup_epochs = 0.0;
    cfg.probe.max_epochs = 3;
    let path = dir.join("small.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn synth_data_writes_a_balanced_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let o = usjepa(&["synth-data", "--classes", "3", "--count", "30", "--size", "32", "--out"], &[&out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = DatasetManifest::read(&out.join("manifest.tsv")).unwrap();
    assert_eq!(m.len(), 30);
    for c in 0..3 {
        assert_eq!(m.records().filter(|r| r.label == Some(c)).count(), 10);
    }
    assert!(out.join("frames/00029.png").exists());
    assert!(out.join("masks/00029.pbm").exists());

    let prepared = dir.path().join("prepared");
    let cfg = small_config(dir.path());
    let o = usjepa(&["preprocess", "--config"], &[&cfg, Path::new("--manifest"), &out.join("manifest.tsv"), Path::new("--out"), &prepared]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p = DatasetManifest::read(&prepared.join("manifest.tsv")).unwrap();
    assert_eq!(p.len(), 30);
    let labels: Vec<_> = p.records().map(|r| r.label).collect();
    assert_eq!(labels, m.records().map(|r| r.label).collect::<Vec<_>>());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[optimizer]\nlearning_rate = 1.0\n").unwrap();
    let o = usjepa(&["pretrain", "--config"], &[&bad, Path::new("--out"), &dir.path().join("o")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let missing = dir.path().join("missing.toml");
    let o = usjepa(&["pretrain", "--config"], &[&missing]);
    assert_eq!(o.status.code(), Some(2));

    let o = usjepa(&["probe", "--out"], &[dir.path()]);
    assert_eq!(o.status.code(), Some(2), "probe without a backbone");

    let o = usjepa(&["pretrain", "--usrc", "maybe"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = usjepa(
        &["probe", "--config"],
        &[&cfg, Path::new("--checkpoint"), &dir.path().join("nope.ckpt"), Path::new("--out"), dir.path()],
    );
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pretrain_then_probe_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let o = usjepa(&["pretrain", "--workers", "1", "--usrc", "off", "--loss", "l1", "--config"], &[&cfg, Path::new("--out"), &run]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.jsonl", "best.ckpt", "checkpoints/epoch-001.ckpt", "config.toml", "model_card.txt", "summary.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let saved = RunConfig::load(&run.join("config.toml")).unwrap();
    assert!(!saved.train.usrc);

    let evals = dir.path().join("evals");
    let o = usjepa(&["probe", "--run"], &[&run, Path::new("--out"), &evals.join("probe")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(evals.join("probe/probe.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);

    let o = usjepa(&["report", "--out"], &[&evals]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(evals.join("report.md")).unwrap();
    assert!(text.contains("| run |"), "{text}");
    assert!(text.contains(" ± "));
}

#[test]
fn report_lists_mean_and_std_over_five_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let reports = [
        ProbeReport::new("synth", "usjepa", 1.0, None, vec![0.9, 0.92, 0.88, 0.91, 0.89]),
        ProbeReport::new("synth", "random-init", 1.0, None, vec![0.5, 0.52, 0.48, 0.51, 0.49]),
    ];
    write_reports_csv(&dir.path().join("probe.csv"), &reports).unwrap();
    let o = usjepa(&["report", "--out"], &[dir.path()]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("| usjepa | 0.900 ± 0.016 |"), "{text}");
    assert!(text.contains("| random-init | 0.500 ± 0.016 |"), "{text}");
}

#[test]
fn mask_viz_and_gallery_write_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("viz");
    let o = usjepa(&["mask-viz", "--count", "3", "--config"], &[&cfg, Path::new("--out"), &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("mask-002.png").exists());

    let out = dir.path().join("gallery");
    let o = usjepa(&["corrupt-gallery", "--count", "1", "--config"], &[&cfg, Path::new("--out"), &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("000-blur-3.png").exists());
    assert!(out.join("000-speckle-1.png").exists());
}
