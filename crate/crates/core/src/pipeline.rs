//! End-to-end wiring from a [`RunConfig`] to pretraining runs and probe
//! evaluations.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig};
use crate::data::{prepare_manifest, synthetic_manifest, DataError, PreparedFrame};
use crate::eval::{extract_features, EvalError, TaskFeatures};
use crate::model::{write_model_card, ModelError, ModelStack, TeacherMode};
use crate::numerics::{Checkpoint, CheckpointMeta, NumericsError};
use crate::objective::{pretrain, ObjectiveError, PretrainData, PretrainSummary, Trainer};
use crate::rng::derive_seed;
use crate::sampling::{holdout_split, DatasetManifest, SamplingError};

const CORPUS_STREAM: u64 = 0xC0;
const TASK_STREAM: u64 = 0x7A5C;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}")]
    Task(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_))
    }
}

/// SHA-256 of the canonical TOML form of `cfg`.
pub fn config_hash(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_toml().as_bytes()))
}

/// The pretraining corpus named by the config.
pub fn corpus_manifest(cfg: &RunConfig) -> Result<DatasetManifest, PipelineError> {
    let c = &cfg.corpus;
    Ok(match &c.manifest {
        Some(path) => DatasetManifest::read(path)?,
        None => synthetic_manifest(
            &c.dataset_id,
            c.synthetic_count,
            c.classes,
            derive_seed(cfg.seed, &[CORPUS_STREAM]),
            c.threshold,
        ),
    })
}

/// Student, predictor and teacher initialized from the config seed, with a
/// static teacher loaded from its source.
pub fn build_stack(cfg: &RunConfig) -> Result<ModelStack<f32>, PipelineError> {
    let mut stack = ModelStack::new(&cfg.model, cfg.seed)?;
    if let TeacherMode::Static { source } = &cfg.model.teacher {
        stack.load_teacher(source)?;
    }
    Ok(stack)
}

fn teacher_provenance(cfg: &RunConfig) -> String {
    match &cfg.model.teacher {
        TeacherMode::Static { source } => format!("static {source}"),
        TeacherMode::Ema {
            momentum_start,
            momentum_end,
        } => format!("ema {momentum_start} -> {momentum_end}"),
    }
}

/// Holdout split, preprocessing, training and bookkeeping for one run.
///
/// Besides the trainer outputs, writes the resolved `config.toml`, the
/// train/val manifests and `model_card.txt` into `out_dir`.
pub fn run_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<PretrainSummary, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let manifest = corpus_manifest(cfg)?;
    let (train_manifest, val_manifest) = holdout_split(&manifest, cfg.train.holdout_fraction, cfg.seed)?;
    train_manifest.write(&out_dir.join("manifest.train.tsv"))?;
    val_manifest.write(&out_dir.join("manifest.val.tsv"))?;
    info!(
        "corpus: {} train / {} val records in {} dataset(s)",
        train_manifest.len(),
        val_manifest.len(),
        manifest.datasets.len()
    );

    let train = prepare_manifest(&train_manifest, &cfg.data, cfg.workers)?;
    let val = prepare_manifest(&val_manifest, &cfg.data, cfg.workers)?;
    let stack = build_stack(cfg)?;
    let data = PretrainData {
        train_manifest,
        train,
        val,
    };
    let mut trainer = Trainer::new(
        stack,
        cfg.optimizer.clone(),
        cfg.masking.clone(),
        cfg.train.clone(),
        cfg.seed,
        cfg.workers,
        data,
    )?;
    let meta = CheckpointMeta {
        config_hash: config_hash(cfg),
        epoch: 0,
        val_loss: None,
        extra: Default::default(),
    };
    let summary = pretrain(&mut trainer, out_dir, &meta)?;
    write_model_card(
        &out_dir.join("model_card.txt"),
        &cfg.model,
        cfg.seed,
        &teacher_provenance(cfg),
        &[
            ("epochs", summary.epochs.to_string()),
            ("steps", summary.steps.to_string()),
            ("best_epoch", format!("{:?}", summary.best_epoch)),
            ("config_hash", meta.config_hash.clone()),
        ],
    )?;
    Ok(summary)
}

/// Prepared frames of a labelled downstream task.
#[derive(Clone, Debug)]
pub struct TaskFrames {
    pub name: String,
    pub classes: usize,
    pub train: Vec<PreparedFrame>,
    pub val: Vec<PreparedFrame>,
    pub test: Vec<PreparedFrame>,
}

pub fn task_frames(cfg: &RunConfig) -> Result<TaskFrames, PipelineError> {
    let t = &cfg.eval.task;
    let split = |id: &str, i: u64, n: usize| -> Result<Vec<PreparedFrame>, PipelineError> {
        let manifest = match &t.manifest {
            Some(path) => {
                let full = DatasetManifest::read(path)?;
                let records = full
                    .records()
                    .filter(|r| r.dataset_id == id)
                    .cloned()
                    .collect::<Vec<_>>();
                if records.is_empty() {
                    return Err(PipelineError::Task(format!("{}: no `{id}` records", path.display())));
                }
                let mut m = DatasetManifest::from_records(records, full.threshold, full.seed);
                m.base_dir = full.base_dir.clone();
                m
            }
            None => synthetic_manifest(
                id,
                n,
                t.classes,
                derive_seed(cfg.seed, &[TASK_STREAM, i]),
                cfg.corpus.threshold,
            ),
        };
        let frames = prepare_manifest(&manifest, &cfg.data, cfg.workers)?;
        if let Some(bad) = frames.iter().find_map(|f| f.label.filter(|&l| l >= t.classes)) {
            return Err(PipelineError::Task(format!("label {bad} outside 0..{}", t.classes)));
        }
        Ok(frames)
    };
    Ok(TaskFrames {
        name: t.name.clone(),
        classes: t.classes,
        train: split("train", 0, t.synthetic_train)?,
        val: split("val", 1, t.synthetic_val)?,
        test: split("test", 2, t.synthetic_test)?,
    })
}

/// Backbone for probing: the config's freshly initialized stack, with
/// trainable weights replaced from `checkpoint` when given.
pub fn load_backbone(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ModelStack<f32>, PipelineError> {
    let mut stack = ModelStack::new(&cfg.model, cfg.seed)?;
    if let Some(path) = checkpoint {
        stack.restore(&Checkpoint::read(path)?)?;
    }
    Ok(stack)
}

pub fn task_features(
    backbone: &ModelStack<f32>,
    backbone_id: &str,
    frames: &TaskFrames,
    workers: usize,
) -> Result<TaskFeatures, PipelineError> {
    Ok(TaskFeatures {
        task: frames.name.clone(),
        classes: frames.classes,
        train: extract_features(backbone, backbone_id, &frames.train, workers)?,
        val: extract_features(backbone, backbone_id, &frames.val, workers)?,
        test: extract_features(backbone, backbone_id, &frames.test, workers)?,
    })
}

/// `best.ckpt` of a finished run directory, else its latest epoch checkpoint.
pub fn run_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let best = run_dir.join("best.ckpt");
    if best.exists() {
        return Some(best);
    }
    let mut ckpts: Vec<PathBuf> = fs::read_dir(run_dir.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    ckpts.sort();
    ckpts.pop()
}
