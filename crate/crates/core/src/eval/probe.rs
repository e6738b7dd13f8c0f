use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, FeatureTable};
use crate::numerics::{AdamW, ParamStore, Tensor};
use crate::rng::rng_for;

const INIT_STREAM: u64 = 0x1417;
const ORDER_STREAM: u64 = 0x0BDE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: usize,
    /// Standardize features with training-split statistics before the
    /// linear layer.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 150,
            patience: 15,
            seeds: 5,
            standardize: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("probe lr must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("probe weight decay must be non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.seeds == 0 {
            return bad("probe batch size, epochs and seeds must be positive");
        }
        Ok(())
    }
}

/// Softmax regression over (optionally standardized) features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[dim, classes]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn normalize(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s));
    }

    fn logits_of(weight: &[f64], bias: &[f64], z: &[f64], out: &mut [f64]) {
        let k = bias.len();
        out.copy_from_slice(bias);
        for (d, &zd) in z.iter().enumerate() {
            let row = &weight[d * k..(d + 1) * k];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += zd * w);
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(x.len());
        self.normalize(x, &mut z);
        let mut out = vec![0.0; self.classes];
        Self::logits_of(&self.weight, &self.bias, &z, &mut out);
        out
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn predict_all(&self, rows: &[Vec<f64>]) -> Vec<usize> {
        rows.iter().map(|r| self.predict(r)).collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax in place; returns log-sum-exp.
fn softmax(v: &mut [f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
    m + s.ln()
}

#[derive(Clone, Debug)]
pub struct ProbeFit {
    pub probe: LinearProbe,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

fn check_labels(table: &FeatureTable, classes: usize, dim: usize) -> Result<(), EvalError> {
    for (row, &y) in table.rows.iter().zip(&table.labels) {
        if y >= classes {
            return Err(EvalError::Label { label: y, classes });
        }
        if row.len() != dim {
            return Err(EvalError::Width {
                got: row.len(),
                expected: dim,
            });
        }
    }
    Ok(())
}

/// Trains a linear probe with AdamW, cosine-annealed learning rate and early
/// stopping on validation cross-entropy. The returned weights are those of
/// the best validation epoch.
pub fn train_probe(
    train: &FeatureTable,
    val: &FeatureTable,
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeFit, EvalError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(EvalError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(EvalError::EmptySplit("validation"));
    }
    let dim = train.dim();
    check_labels(train, classes, dim)?;
    check_labels(val, classes, dim)?;
    let mut counts = vec![0usize; classes];
    train.labels.iter().for_each(|&y| counts[y] += 1);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(EvalError::MissingClass(c));
    }

    let n = train.len();
    let (mean, scale) = if cfg.standardize {
        let mut mean = vec![0.0; dim];
        for r in &train.rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in &train.rows {
            var.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m));
        }
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        (mean, scale)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let mut probe = LinearProbe {
        mean,
        scale,
        weight: Vec::new(),
        bias: Vec::new(),
        classes,
    };
    let normalize_all = |t: &FeatureTable, p: &LinearProbe| {
        t.rows
            .iter()
            .map(|r| {
                let mut z = Vec::with_capacity(dim);
                p.normalize(r, &mut z);
                z
            })
            .collect::<Vec<_>>()
    };
    let z_train = normalize_all(train, &probe);
    let z_val = normalize_all(val, &probe);

    let mut init = rng_for(seed, &[INIT_STREAM]);
    let bound = 1.0 / (dim.max(1) as f64).sqrt();
    let mut store = ParamStore::<f64>::new();
    let w_id = store.add(
        "probe.weight",
        Tensor::new(
            &[dim, classes],
            (0..dim * classes).map(|_| init.random_range(-bound..bound)).collect(),
        ),
        true,
    );
    let b_id = store.add(
        "probe.bias",
        Tensor::new(&[classes], (0..classes).map(|_| init.random_range(-bound..bound)).collect()),
        true,
    );
    let mut opt = AdamW::new(&store, (0.9, 0.999), 1e-8);
    let mut order_rng = rng_for(seed, &[ORDER_STREAM]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut logits = vec![0.0; classes];

    let val_loss = |store: &ParamStore<f64>, logits: &mut [f64]| {
        let (w, b) = (store.get(w_id).value.data(), store.get(b_id).value.data());
        let mut total = 0.0;
        for (z, &y) in z_val.iter().zip(&val.labels) {
            LinearProbe::logits_of(w, b, z, logits);
            let y_logit = logits[y];
            total += softmax(logits) - y_logit;
        }
        total / z_val.len() as f64
    };

    let mut best = (val_loss(&store, &mut logits), 0usize, store.clone());
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.max_epochs as f64).cos());
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; dim * classes];
            let mut gb = vec![0.0; classes];
            {
                let (w, b) = (store.get(w_id).value.data(), store.get(b_id).value.data());
                for &i in batch {
                    LinearProbe::logits_of(w, b, &z_train[i], &mut logits);
                    softmax(&mut logits);
                    logits[train.labels[i]] -= 1.0;
                    for (d, &zd) in z_train[i].iter().enumerate() {
                        gw[d * classes..(d + 1) * classes]
                            .iter_mut()
                            .zip(&logits)
                            .for_each(|(g, p)| *g += zd * p);
                    }
                    gb.iter_mut().zip(&logits).for_each(|(g, p)| *g += p);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= inv);
            store.get_mut(w_id).grad.data_mut().copy_from_slice(&gw);
            store.get_mut(b_id).grad.data_mut().copy_from_slice(&gb);
            opt.step(&mut store, lr, cfg.weight_decay)
                .map_err(|e| EvalError::Config(e.to_string()))?;
        }
        let loss = val_loss(&store, &mut logits);
        if loss < best.0 {
            best = (loss, epoch + 1, store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, best_store) = best;
    probe.weight = best_store.get(w_id).value.data().to_vec();
    probe.bias = best_store.get(b_id).value.data().to_vec();
    Ok(ProbeFit {
        probe,
        best_epoch,
        best_val_loss,
        epochs_run,
    })
}
