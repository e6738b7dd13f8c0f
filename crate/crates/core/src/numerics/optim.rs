use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::real::Real;
use super::NumericsError;

/// Optimizer hyperparameters and the schedules derived from them.
///
/// Rates and decay coefficients are indexed by a fractional epoch in
/// `[0, total_epochs]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub start_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub wd_start: f64,
    pub wd_final: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 5.0e-5,
            start_lr: 5.0e-6,
            final_lr: 5.0e-7,
            warmup_epochs: 10.0,
            total_epochs: 100.0,
            wd_start: 0.04,
            wd_final: 0.4,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.start_lr <= self.base_lr && self.final_lr <= self.base_lr) {
            return Err("start_lr and final_lr must not exceed base_lr".into());
        }
        if !(0.0 <= self.warmup_epochs && self.warmup_epochs <= self.total_epochs) {
            return Err("warmup_epochs must lie in [0, total_epochs]".into());
        }
        if self.total_epochs <= 0.0 {
            return Err("total_epochs must be positive".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err("betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Linear warmup from `start_lr` to `base_lr`, then cosine decay to `final_lr`.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let epoch = epoch.clamp(0.0, self.total_epochs);
        if epoch < self.warmup_epochs {
            let t = epoch / self.warmup_epochs;
            return self.start_lr + (self.base_lr - self.start_lr) * t;
        }
        let span = self.total_epochs - self.warmup_epochs;
        if span <= 0.0 {
            return self.final_lr;
        }
        let t = (epoch - self.warmup_epochs) / span;
        self.final_lr + (self.base_lr - self.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Cosine ramp from `wd_start` to `wd_final` over the whole run.
    pub fn wd_at(&self, epoch: f64) -> f64 {
        let t = (epoch / self.total_epochs).clamp(0.0, 1.0);
        self.wd_start + (self.wd_final - self.wd_start) * 0.5 * (1.0 - (std::f64::consts::PI * t).cos())
    }
}

/// AdamW with decoupled weight decay.
///
/// Decay is applied to parameters of rank two or more; biases, norms and
/// other vectors are only moved by the adaptive step.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    betas: (f64, f64),
    epsilon: f64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, betas: (f64, f64), epsilon: f64) -> Self {
        let zeros = |s: &ParamStore<T>| s.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            betas,
            epsilon,
            first: zeros(store),
            second: zeros(store),
            steps: 0,
        }
    }

    pub fn from_config(store: &ParamStore<T>, cfg: &OptimizerConfig) -> Self {
        Self::new(store, cfg.betas, cfg.epsilon)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, weight_decay: f64) -> Result<(), NumericsError> {
        self.steps += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.steps as i32);
        let bc2 = 1.0 - b2.powi(self.steps as i32);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let step_size = T::from_f64(lr / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        let eps = T::from_f64(self.epsilon);

        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            if p.value.shape().len() >= 2 && weight_decay != 0.0 {
                let keep = T::from_f64(1.0 - lr * weight_decay);
                p.value.data_mut().iter_mut().for_each(|v| *v *= keep);
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1t * m[j] + one_b1 * g;
                v[j] = b2t * v[j] + one_b2 * g * g;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                *w -= step_size * m[j] / denom;
            }
            if !p.value.is_finite() {
                return Err(NumericsError::NonFinite(format!("parameter {} after AdamW step", p.name)));
            }
        }
        Ok(())
    }
}
