use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::{sample_loss, LossConfig, ObjectiveError};
use crate::data::PreparedFrame;
use crate::frames::Frame;
use crate::masking::{sample_mask_set, MaskSet, MaskingConfig, PatchGrid};
use crate::model::{ema_update, ModelStack};
use crate::numerics::{AdamW, CheckpointMeta, Gradients, Graph, OptimizerConfig, Real, Tensor};
use crate::par::map_indexed;
use crate::rng::{derive_seed, rng_for};
use crate::sampling::{DatasetManifest, WeightedSampler};

const MASK_STREAM: u64 = 0x4D41;
const VAL_MASK_STREAM: u64 = 0x5641;
const SAMPLER_STREAM: u64 = 0x5341;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub holdout_fraction: f64,
    /// Restrict masks to patches touching the ultrasound region.
    pub usrc: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            holdout_fraction: 0.05,
            usrc: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err("holdout_fraction must lie in (0, 1)".into());
        }
        self.loss.validate()
    }
}

/// One training example: a frame, its masks, and optionally precomputed
/// teacher embeddings (computed on the fly when absent).
pub struct StepSample<'a, T: Real> {
    pub frame: &'a Frame,
    pub masks: &'a MaskSet,
    pub teacher: Option<&'a Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub grad_norm: f64,
}

fn sample_forward<T: Real>(
    stack: &ModelStack<T>,
    s: &StepSample<'_, T>,
    cfg: &LossConfig,
    backward: bool,
) -> Result<(f64, Option<Gradients<T>>), ObjectiveError> {
    let grid = stack.grid_for(s.frame)?;
    let owned;
    let s_y = match s.teacher {
        Some(t) => t,
        None => {
            owned = stack.encode_target(s.frame, &grid)?;
            &owned
        }
    };
    let mut g = Graph::new(&stack.params);
    let loss = sample_loss(stack, &mut g, s.frame, &grid, s.masks, s_y, cfg)?;
    let value = g.value(loss).item().as_f64();
    let grads = if backward { Some(g.backward(loss)?) } else { None };
    Ok((value, grads))
}

/// One optimizer update on the mean loss of `batch`.
///
/// Per-sample gradients are computed on up to `workers` threads and summed in
/// batch order, so the update is identical for any worker count. With an EMA
/// teacher, `ema_momentum` is applied after the step.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    stack: &mut ModelStack<T>,
    optimizer: &mut AdamW<T>,
    batch: &[StepSample<'_, T>],
    cfg: &LossConfig,
    lr: f64,
    weight_decay: f64,
    ema_momentum: Option<f64>,
    workers: usize,
) -> Result<StepOutput, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::NoTargets);
    }
    let step = optimizer.steps() + 1;
    let shared = &*stack;
    let results = map_indexed(batch.len(), workers, |i| sample_forward(shared, &batch[i], cfg, true));
    let mut total = Gradients::empty(stack.params.len());
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g.expect("backward requested"));
    }
    let n = batch.len() as f64;
    loss /= n;
    total.scale(T::from_f64(1.0 / n));
    if !loss.is_finite() || !total.is_finite() {
        return Err(ObjectiveError::NonFinite {
            epoch: 0,
            step,
            detail: format!("loss {loss}, gradients finite: {}", total.is_finite()),
        });
    }
    stack.params.load_grads(&total);
    let grad_norm = stack.params.grad_norm();
    optimizer
        .step(&mut stack.params, lr, weight_decay)
        .map_err(|e| ObjectiveError::NonFinite {
            epoch: 0,
            step,
            detail: e.to_string(),
        })?;
    if let Some(m) = ema_momentum {
        ema_update(&mut stack.teacher_params, &stack.params, m)?;
    }
    Ok(StepOutput { loss, grad_norm })
}

/// Mean loss over `samples` without updating anything.
pub fn validate<T: Real>(
    stack: &ModelStack<T>,
    samples: &[StepSample<'_, T>],
    cfg: &LossConfig,
    workers: usize,
) -> Result<f64, ObjectiveError> {
    if samples.is_empty() {
        return Err(ObjectiveError::EmptyValidation);
    }
    let losses = map_indexed(samples.len(), workers, |i| sample_forward(stack, &samples[i], cfg, false));
    let mut total = 0.0;
    for l in losses {
        total += l?.0;
    }
    Ok(total / samples.len() as f64)
}

/// Epoch with the lowest validation loss; the earliest wins ties.
pub fn select_best(history: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(e, l) in history {
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((e, l));
        }
    }
    best.map(|(e, _)| e)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub fallbacks: u64,
    pub rejected: u64,
    /// `(epoch, validation loss)`; epoch 0 is the untrained model.
    pub val_history: Vec<(usize, f64)>,
}

impl TrainState {
    fn record_val(&mut self, epoch: usize, loss: f64) -> bool {
        self.val_history.push((epoch, loss));
        let improved = epoch > 0 && self.best_val_loss.is_none_or(|b| loss < b);
        if improved {
            self.best_val_loss = Some(loss);
            self.best_epoch = Some(epoch);
        }
        improved
    }
}

/// Training split, its manifest (for weighted sampling), and the held-out frames.
pub struct PretrainData {
    pub train_manifest: DatasetManifest,
    pub train: Vec<PreparedFrame>,
    pub val: Vec<PreparedFrame>,
}

#[derive(Serialize)]
struct StepLine {
    kind: &'static str,
    epoch: usize,
    step: u64,
    loss: f64,
    lr: f64,
    wd: f64,
    grad_norm: f64,
    fallbacks: u64,
    rejected: u64,
}

#[derive(Serialize)]
struct EpochLine {
    kind: &'static str,
    epoch: usize,
    val_loss: f64,
    best: bool,
}

pub struct Trainer {
    pub stack: ModelStack<f32>,
    pub optimizer: AdamW<f32>,
    pub state: TrainState,
    opt_cfg: OptimizerConfig,
    masking: MaskingConfig,
    cfg: TrainConfig,
    workers: usize,
    data: PretrainData,
    offsets: Vec<usize>,
    grid: PatchGrid,
    sampler: WeightedSampler,
    train_targets: Vec<Option<Tensor<f32>>>,
    val_masks: Vec<(usize, MaskSet)>,
    val_targets: Vec<Option<Tensor<f32>>>,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stack: ModelStack<f32>,
        opt_cfg: OptimizerConfig,
        masking: MaskingConfig,
        cfg: TrainConfig,
        seed: u64,
        workers: usize,
        data: PretrainData,
    ) -> Result<Self, ObjectiveError> {
        opt_cfg.validate().map_err(ObjectiveError::Config)?;
        masking.validate().map_err(ObjectiveError::Config)?;
        cfg.validate().map_err(ObjectiveError::Config)?;
        if opt_cfg.total_epochs.fract() != 0.0 {
            return Err(ObjectiveError::Config("total_epochs must be a whole number".into()));
        }
        if data.train.len() != data.train_manifest.len() {
            return Err(ObjectiveError::Config(format!(
                "{} prepared frames for {} manifest records",
                data.train.len(),
                data.train_manifest.len()
            )));
        }
        let first = data.train.first().ok_or(ObjectiveError::Config("no training frames".into()))?;
        let grid = stack.grid_for(&first.frame)?;
        for f in data.train.iter().chain(&data.val) {
            if (f.frame.height(), f.frame.width()) != (grid.height, grid.width) {
                return Err(ObjectiveError::Config("training frames differ in size".into()));
            }
        }
        let mut offsets = Vec::with_capacity(data.train_manifest.datasets.len());
        let mut acc = 0;
        for d in &data.train_manifest.datasets {
            offsets.push(acc);
            acc += d.size();
        }
        let sampler = WeightedSampler::new(&data.train_manifest, derive_seed(seed, &[SAMPLER_STREAM]))?;

        let mut val_masks = Vec::new();
        let mut rejected = 0;
        for (i, f) in data.val.iter().enumerate() {
            let region = cfg.usrc.then_some(&f.region);
            match sample_mask_set(&grid, region, &masking, &mut rng_for(seed, &[VAL_MASK_STREAM, i as u64])) {
                Ok(m) => val_masks.push((i, m)),
                Err(_) => rejected += 1,
            }
        }
        if rejected > 0 {
            info!("{rejected} validation frame(s) admit no mask set and are skipped");
        }

        let (train_targets, val_targets) = if stack.config.teacher.is_static() {
            let t = &stack;
            let cache = |frames: &[PreparedFrame]| -> Result<Vec<Option<Tensor<f32>>>, ObjectiveError> {
                map_indexed(frames.len(), workers, |i| t.encode_target(&frames[i].frame, &grid).map(Some))
                    .into_iter()
                    .map(|r| r.map_err(ObjectiveError::from))
                    .collect()
            };
            (cache(&data.train)?, cache(&data.val)?)
        } else {
            (vec![None; data.train.len()], vec![None; data.val.len()])
        };

        let optimizer = AdamW::from_config(&stack.params, &opt_cfg);
        Ok(Self {
            stack,
            optimizer,
            state: TrainState {
                seed,
                ..TrainState::default()
            },
            opt_cfg,
            masking,
            cfg,
            workers,
            data,
            offsets,
            grid,
            sampler,
            train_targets,
            val_masks,
            val_targets,
        })
    }

    pub fn epochs(&self) -> usize {
        self.opt_cfg.total_epochs as usize
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.epoch_len().div_ceil(self.cfg.batch_size)
    }

    pub fn validate(&self) -> Result<f64, ObjectiveError> {
        let samples: Vec<StepSample<'_, f32>> = self
            .val_masks
            .iter()
            .map(|(i, m)| StepSample {
                frame: &self.data.val[*i].frame,
                masks: m,
                teacher: self.val_targets[*i].as_ref(),
            })
            .collect();
        validate(&self.stack, &samples, &self.cfg.loss, self.workers)
    }

    /// Runs one epoch of weighted draws, calling `on_step` after each update.
    fn run_epoch(&mut self, mut on_step: impl FnMut(&StepLine) -> std::io::Result<()>) -> Result<(), ObjectiveError> {
        let epoch = self.state.epoch;
        let draws = self.sampler.draw_epoch();
        let steps = draws.len().div_ceil(self.cfg.batch_size);
        let total_steps = (steps * self.epochs()) as f64;
        for (s, chunk) in draws.chunks(self.cfg.batch_size).enumerate() {
            let global = self.state.step;
            let mut picked = Vec::with_capacity(chunk.len());
            for (b, &(d, r)) in chunk.iter().enumerate() {
                let idx = self.offsets[d] + r;
                let f = &self.data.train[idx];
                let region = self.cfg.usrc.then_some(&f.region);
                let mut rng = rng_for(self.state.seed, &[MASK_STREAM, global, b as u64]);
                match sample_mask_set(&self.grid, region, &self.masking, &mut rng) {
                    Ok(m) => {
                        self.state.fallbacks += m.fallbacks as u64;
                        picked.push((idx, m));
                    }
                    Err(_) => self.state.rejected += 1,
                }
            }
            let progress = epoch as f64 + s as f64 / steps as f64;
            let lr = self.opt_cfg.lr_at(progress);
            let wd = self.opt_cfg.wd_at(progress);
            self.state.step += 1;
            if picked.is_empty() {
                continue;
            }
            let batch: Vec<StepSample<'_, f32>> = picked
                .iter()
                .map(|(i, m)| StepSample {
                    frame: &self.data.train[*i].frame,
                    masks: m,
                    teacher: self.train_targets[*i].as_ref(),
                })
                .collect();
            let momentum = self.stack.config.teacher.momentum_at((global + 1) as f64 / total_steps);
            let out = train_step(
                &mut self.stack,
                &mut self.optimizer,
                &batch,
                &self.cfg.loss,
                lr,
                wd,
                momentum,
                self.workers,
            )
            .map_err(|e| match e {
                ObjectiveError::NonFinite { step, detail, .. } => ObjectiveError::NonFinite {
                    epoch: epoch + 1,
                    step,
                    detail,
                },
                other => other,
            })?;
            on_step(&StepLine {
                kind: "step",
                epoch: epoch + 1,
                step: global + 1,
                loss: out.loss,
                lr,
                wd,
                grad_norm: out.grad_norm,
                fallbacks: self.state.fallbacks,
                rejected: self.state.rejected,
            })?;
        }
        self.state.epoch += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub val_history: Vec<(usize, f64)>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub teacher_digest_before: String,
    pub teacher_digest_after: String,
    pub fallbacks: u64,
    pub rejected: u64,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

/// Full run: baseline validation, then per epoch training, validation and a
/// checkpoint. The lowest-validation epoch is copied to `best.ckpt`.
///
/// Writes `metrics.jsonl`, `checkpoints/`, `best.ckpt` and
/// `train_state.json` under `out_dir`.
pub fn pretrain(trainer: &mut Trainer, out_dir: &Path, meta: &CheckpointMeta) -> Result<PretrainSummary, ObjectiveError> {
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut log = BufWriter::new(File::create(out_dir.join("metrics.jsonl"))?);
    let mut write_line = |line: &dyn erased::Line| -> std::io::Result<()> {
        writeln!(log, "{}", line.json())?;
        log.flush()
    };
    let teacher_before = trainer.stack.teacher_digest();
    let val0 = trainer.validate()?;
    trainer.state.record_val(0, val0);
    write_line(&EpochLine {
        kind: "epoch",
        epoch: 0,
        val_loss: val0,
        best: false,
    })?;
    info!("epoch 0: val {val0:.6}");

    let best_path = out_dir.join("best.ckpt");
    let mut last_path = best_path.clone();
    for _ in 0..trainer.epochs() {
        trainer.run_epoch(|l| write_line(l))?;
        let epoch = trainer.state.epoch;
        let val = trainer.validate()?;
        let improved = trainer.state.record_val(epoch, val);
        write_line(&EpochLine {
            kind: "epoch",
            epoch,
            val_loss: val,
            best: improved,
        })?;
        info!("epoch {epoch}: val {val:.6}{}", if improved { " (best)" } else { "" });

        let mut m = meta.clone();
        m.epoch = epoch as u64;
        m.val_loss = Some(val);
        m.extra.insert("step".into(), trainer.state.step.to_string());
        let ck = trainer.stack.to_checkpoint(m);
        last_path = ckpt_dir.join(checkpoint_name(epoch));
        ck.write(&last_path)?;
        if improved {
            fs::copy(&last_path, &best_path)?;
        }
        fs::write(
            out_dir.join("train_state.json"),
            serde_json::to_string_pretty(&trainer.state).expect("state serializes"),
        )?;
    }
    Ok(PretrainSummary {
        epochs: trainer.state.epoch,
        steps: trainer.state.step,
        val_history: trainer.state.val_history.clone(),
        best_epoch: trainer.state.best_epoch,
        best_val_loss: trainer.state.best_val_loss,
        teacher_digest_before: teacher_before,
        teacher_digest_after: trainer.stack.teacher_digest(),
        fallbacks: trainer.state.fallbacks,
        rejected: trainer.state.rejected,
        final_checkpoint: last_path,
        best_checkpoint: best_path,
    })
}

mod erased {
    pub trait Line {
        fn json(&self) -> String;
    }

    impl<T: serde::Serialize> Line for T {
        fn json(&self) -> String {
            serde_json::to_string(self).expect("metrics serialize")
        }
    }
}
