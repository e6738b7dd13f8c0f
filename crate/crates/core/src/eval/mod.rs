//! Frozen-backbone evaluation: pooled features, linear probes, macro-F1,
//! few-shot label fractions, and corruption sweeps.

mod probe;
mod report;
#[cfg(test)]
mod tests;

pub use probe::{train_probe, LinearProbe, ProbeConfig, ProbeFit};
pub use report::{
    mean_std, read_reports_csv, reports_markdown, summary_markdown, trend_test, write_reports_csv, ProbeReport,
    TrendResult,
};

use log::warn;
use rand::seq::SliceRandom;

use crate::corruption::{corrupt, CorruptionKind, CorruptionSpec};
use crate::data::PreparedFrame;
use crate::model::{ModelError, ModelStack};
use crate::numerics::Real;
use crate::par::map_indexed;
use crate::rng::{derive_seed, rng_for};

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.01, 0.05, 0.10, 0.50, 1.0];
pub const SEVERITY_GRID: [u8; 4] = [0, 1, 2, 3];

const SUBSAMPLE_STREAM: u64 = 0x5355;
const SPECKLE_STREAM: u64 = 0x5350;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("class {0} has no training samples")]
    MissingClass(usize),
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("frame {0} has no label")]
    Unlabeled(usize),
    #[error("feature width {got}, expected {expected}")]
    Width { got: usize, expected: usize },
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("report parse error: {0}")]
    Report(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corruption(#[from] crate::corruption::CorruptionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pooled features with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub backbone: String,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, indices: &[usize]) -> FeatureTable {
        FeatureTable {
            backbone: self.backbone.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Train, validation and test tables of one downstream task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFeatures {
    pub task: String,
    pub classes: usize,
    pub train: FeatureTable,
    pub val: FeatureTable,
    pub test: FeatureTable,
}

/// Mean-pooled student features for every frame, in order.
pub fn extract_features<T: Real>(
    backbone: &ModelStack<T>,
    backbone_id: &str,
    frames: &[PreparedFrame],
    workers: usize,
) -> Result<FeatureTable, EvalError> {
    let rows = map_indexed(frames.len(), workers, |i| backbone.pooled_features(&frames[i].frame))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let labels = frames
        .iter()
        .enumerate()
        .map(|(i, f)| f.label.ok_or(EvalError::Unlabeled(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FeatureTable {
        backbone: backbone_id.to_string(),
        rows,
        labels,
    })
}

/// Unweighted mean of per-class F1 over `classes` classes. A class with no
/// true and no predicted samples scores 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], classes: usize) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "macro_f1: length mismatch");
    if classes == 0 {
        return 0.0;
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
        } else {
            if p < classes {
                fp[p] += 1;
            }
            fn_[y] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    total / classes as f64
}

/// Per-class sample count at `fraction`: `round(f·n)`, raised to one when
/// that rounds to zero, so it is always `⌊f·n⌋` or `⌈f·n⌉`.
pub fn stratified_count(n: usize, fraction: f64) -> usize {
    let exact = fraction * n as f64;
    let r = exact.round() as usize;
    if r == 0 && n > 0 {
        exact.ceil() as usize
    } else {
        r.min(n)
    }
}

/// Indices of a class-stratified subsample, sorted ascending. At fraction 1
/// this is `0..n` and consumes nothing from `rng`.
pub fn stratified_subsample(labels: &[usize], classes: usize, fraction: f64, rng: &mut impl rand::Rng) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..labels.len()).collect();
    }
    let mut chosen = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let m = stratified_count(members.len(), fraction);
        members.shuffle(rng);
        chosen.extend_from_slice(&members[..m]);
    }
    chosen.sort_unstable();
    chosen
}

/// Seed used for the `i`-th repetition.
pub fn probe_seed(base: u64, i: usize) -> u64 {
    derive_seed(base, &[i as u64])
}

/// Probe macro-F1 on the test split for each seed, on full training data.
pub fn probe_scores(task: &TaskFeatures, cfg: &ProbeConfig, base_seed: u64) -> Result<Vec<f64>, EvalError> {
    (0..cfg.seeds)
        .map(|i| {
            let fit = train_probe(&task.train, &task.val, task.classes, cfg, probe_seed(base_seed, i))?;
            Ok(macro_f1(&fit.probe.predict_all(&task.test.rows), &task.test.labels, task.classes))
        })
        .collect()
}

/// Probe scores at each label fraction; the training split is subsampled
/// per seed, validation and test stay whole.
pub fn fewshot_curve(
    task: &TaskFeatures,
    fractions: &[f64],
    cfg: &ProbeConfig,
    base_seed: u64,
) -> Result<Vec<ProbeReport>, EvalError> {
    let mut out = Vec::new();
    for (fi, &f) in fractions.iter().enumerate() {
        let mut per_class = vec![0usize; task.classes];
        for &y in &task.train.labels {
            per_class[y] += 1;
        }
        if per_class.iter().any(|&n| stratified_count(n, f) == 0) {
            warn!("fraction {f} leaves a class without samples; skipped");
            continue;
        }
        let mut scores = Vec::with_capacity(cfg.seeds);
        for i in 0..cfg.seeds {
            let seed = probe_seed(base_seed, i);
            let mut rng = rng_for(seed, &[SUBSAMPLE_STREAM, fi as u64]);
            let idx = stratified_subsample(&task.train.labels, task.classes, f, &mut rng);
            let fit = train_probe(&task.train.subset(&idx), &task.val, task.classes, cfg, seed)?;
            scores.push(macro_f1(&fit.probe.predict_all(&task.test.rows), &task.test.labels, task.classes));
        }
        out.push(ProbeReport::new(&task.task, &task.train.backbone, f, None, scores));
    }
    Ok(out)
}

/// Frames of `frames` corrupted by `(kind, severity)`; severity 0 returns
/// clones. Speckle seeds derive from `seed` and the frame index.
pub fn corrupt_frames(
    frames: &[PreparedFrame],
    kind: CorruptionKind,
    severity: u8,
    seed: u64,
) -> Result<Vec<PreparedFrame>, EvalError> {
    if severity == 0 {
        return Ok(frames.to_vec());
    }
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let spec = CorruptionSpec::new(
                kind,
                severity,
                derive_seed(seed, &[SPECKLE_STREAM, severity as u64, i as u64]),
            )?;
            Ok(PreparedFrame {
                frame: corrupt(&f.frame, &f.region, &spec)?,
                ..f.clone()
            })
        })
        .collect()
}

/// Trains one probe per seed on clean features, then scores it on the test
/// frames under each corruption kind and severity in `0..=3`. The severity-0
/// entry uses the clean test features.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep<T: Real>(
    backbone: &ModelStack<T>,
    task: &TaskFeatures,
    test_frames: &[PreparedFrame],
    kinds: &[CorruptionKind],
    cfg: &ProbeConfig,
    base_seed: u64,
    workers: usize,
) -> Result<Vec<ProbeReport>, EvalError> {
    if test_frames.len() != task.test.len() {
        return Err(EvalError::Config("test frames and test features disagree".into()));
    }
    let probes = (0..cfg.seeds)
        .map(|i| train_probe(&task.train, &task.val, task.classes, cfg, probe_seed(base_seed, i)).map(|f| f.probe))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for &kind in kinds {
        for severity in SEVERITY_GRID {
            let features = if severity == 0 {
                task.test.rows.clone()
            } else {
                let frames = corrupt_frames(test_frames, kind, severity, base_seed)?;
                extract_features(backbone, &task.train.backbone, &frames, workers)?.rows
            };
            let scores = probes
                .iter()
                .map(|p| macro_f1(&p.predict_all(&features), &task.test.labels, task.classes))
                .collect();
            out.push(ProbeReport::new(
                &task.task,
                &task.train.backbone,
                1.0,
                Some((kind, severity)),
                scores,
            ));
        }
    }
    Ok(out)
}
