//! Masked latent regression losses, the optimization step, validation, and
//! the pretraining loop.

mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use train::{
    pretrain, select_best, train_step, validate, PretrainData, PretrainSummary, StepOutput, StepSample, TrainConfig,
    TrainState, Trainer,
};

use crate::frames::Frame;
use crate::masking::{MaskSet, PatchGrid};
use crate::model::{select, ModelError, ModelStack};
use crate::numerics::{Graph, NumericsError, Real, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: prediction {pred:?} vs target {target:?}")]
    Shape { pred: Vec<usize>, target: Vec<usize> },
    #[error("no prediction/target pairs")]
    NoTargets,
    #[error("{0} predictions but {1} targets")]
    PairCount(usize, usize),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: u64, detail: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Masking(#[from] crate::masking::MaskingError),
    #[error(transparent)]
    Sampling(#[from] crate::sampling::SamplingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SmoothL1,
    L1,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SmoothL1 => "smooth_l1",
            Self::L1 => "l1",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "smooth_l1" => Ok(Self::SmoothL1),
            "l1" => Ok(Self::L1),
            other => Err(format!("unknown loss {other:?}; expected smooth_l1 or l1")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Transition point between the quadratic and linear pieces of smooth L1.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::SmoothL1,
            beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.beta > 0.0 {
            Ok(())
        } else {
            Err(format!("loss beta must be positive, got {}", self.beta))
        }
    }
}

fn check_shapes<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(), ObjectiveError> {
    if pred.shape() == target.shape() {
        Ok(())
    } else {
        Err(ObjectiveError::Shape {
            pred: pred.shape().to_vec(),
            target: target.shape().to_vec(),
        })
    }
}

/// Elementwise `0.5 d²/β` for `|d| < β`, else `|d| − 0.5 β`, averaged.
pub fn smooth_l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, beta: f64) -> Result<f64, ObjectiveError> {
    check_shapes(pred, target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p.as_f64() - t.as_f64()).abs();
            if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            }
        })
        .sum();
    Ok(total / pred.len().max(1) as f64)
}

pub fn l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64, ObjectiveError> {
    check_shapes(pred, target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p.as_f64() - t.as_f64()).abs())
        .sum();
    Ok(total / pred.len().max(1) as f64)
}

/// Mean over the `T` targets of the per-target loss.
pub fn us_jepa_loss<T: Real>(
    predictions: &[Tensor<T>],
    targets: &[Tensor<T>],
    cfg: &LossConfig,
) -> Result<f64, ObjectiveError> {
    if predictions.len() != targets.len() {
        return Err(ObjectiveError::PairCount(predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        return Err(ObjectiveError::NoTargets);
    }
    let mut total = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        total += match cfg.kind {
            LossKind::SmoothL1 => smooth_l1(p, t, cfg.beta)?,
            LossKind::L1 => l1(p, t)?,
        };
    }
    Ok(total / predictions.len() as f64)
}

/// Recorded version of [`us_jepa_loss`].
pub fn graph_loss<T: Real>(
    g: &mut Graph<'_, T>,
    predictions: &[Var],
    targets: &[Tensor<T>],
    cfg: &LossConfig,
) -> Result<Var, ObjectiveError> {
    if predictions.len() != targets.len() {
        return Err(ObjectiveError::PairCount(predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        return Err(ObjectiveError::NoTargets);
    }
    let mut terms = Vec::with_capacity(predictions.len());
    for (&p, t) in predictions.iter().zip(targets) {
        check_shapes(g.value(p), t)?;
        terms.push(match cfg.kind {
            LossKind::SmoothL1 => g.smooth_l1(p, t, T::from_f64(cfg.beta)),
            LossKind::L1 => g.l1(p, t),
        });
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(g.scale(total, T::from_f64(1.0 / terms.len() as f64)))
}

/// Records the full student → predictor → adapter path for one frame and
/// returns the loss against the teacher embeddings `s_y`.
pub fn sample_loss<T: Real>(
    stack: &ModelStack<T>,
    g: &mut Graph<'_, T>,
    frame: &Frame,
    grid: &PatchGrid,
    masks: &MaskSet,
    s_y: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var, ObjectiveError> {
    let c = stack.encode_context(g, frame, grid, &masks.context)?;
    let mut preds = Vec::with_capacity(masks.targets.len());
    let mut targets = Vec::with_capacity(masks.targets.len());
    for m in &masks.targets {
        preds.push(stack.predict_target(g, c, grid, &masks.context, m)?);
        targets.push(select(s_y, m)?);
    }
    graph_loss(g, &preds, &targets, cfg)
}
