//! Transformer building blocks recorded onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn trunc_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let w = trunc_normal(rng, fan_in * fan_out, INIT_STD);
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::from_f64(&[fan_in, fan_out], &w), trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), trainable),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64, trainable: bool) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[dim], T::one()), trainable),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), trainable),
            eps,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub heads: usize,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        eps: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, eps, trainable),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, trainable, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, trainable, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, eps, trainable),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim, trainable, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim, trainable, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let dim = g.value(x).dims2().1;
        let dh = dim / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let h = self.norm1.forward(g, x);
        let qkv = self.qkv.forward(g, h);
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = g.slice_cols(qkv, head * dh, dh);
            let k = g.slice_cols(qkv, dim + head * dh, dh);
            let v = g.slice_cols(qkv, 2 * dim + head * dh, dh);
            let s = g.matmul_nt(q, k);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, v));
        }
        let attn = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let attn = self.proj.forward(g, attn);
        let x = g.add(x, attn);

        let h = self.norm2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }
}

/// Fixed 2-D sine-cosine embedding for the given `(row, col)` positions.
///
/// The first half of the channels encodes the column, the second half the
/// row; each half is `[sin(p·ω_k), cos(p·ω_k)]` with `ω_k = 10000^(-k/(dim/4))`.
pub fn sincos_2d(positions: &[(usize, usize)], dim: usize) -> Vec<f64> {
    assert!(dim % 4 == 0, "positional dim must be divisible by 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10_000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &(r, c) in positions {
        for p in [c as f64, r as f64] {
            out.extend(omega.iter().map(|w| (p * w).sin()));
            out.extend(omega.iter().map(|w| (p * w).cos()));
        }
    }
    out
}
