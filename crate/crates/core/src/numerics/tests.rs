use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Central finite differences over every trainable coordinate; returns the
/// largest relative error against the analytic gradient.
fn max_rel_error(
    store: &mut ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>) -> Var,
) -> f64 {
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.backward(loss).unwrap()
    };
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let loss = f(&mut g);
        g.value(loss).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..store.len() {
        let id = ParamId(i);
        if !store.get(id).trainable {
            continue;
        }
        for j in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let up = eval(store);
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let down = eval(store);
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn sum_gradient_is_ones() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::from_f64(&[3], &[0.3, -1.0, 2.0]), true);
    let mut g = Graph::new(&store);
    let v = g.param(p);
    let loss = g.sum(v);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(p).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_sum_gradient_is_twice_value() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]), true);
    let mut g = Graph::new(&store);
    let v = g.param(p);
    let sq = g.mul(v, v);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(p).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::zeros(&[2, 2]), true);
    let mut g = Graph::new(&store);
    let v = g.param(p);
    assert!(matches!(g.backward(v), Err(NumericsError::NonScalarLoss(_))));
}

#[test]
fn frozen_parameters_receive_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let b = store.add("b", Tensor::from_f64(&[2], &[0.5, 0.5]), true);
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, -1.0]));
    let wv = g.param(w);
    let bv = g.param(b);
    let h = g.matmul(x, wv);
    let h = g.add_row(h, bv);
    let loss = g.sum(h);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(w).is_none());
    store.get_mut(w).grad = Tensor::full(&[2, 2], 9.0);
    store.load_grads(&grads);
    assert!(store.get(w).grad.data().iter().all(|&v| v == 0.0));
    assert_eq!(store.get(b).grad.data(), &[1.0, 1.0]);
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let w1 = store.add("w1", random_tensor(&mut rng, &[4, 6]), true);
    let b1 = store.add("b1", random_tensor(&mut rng, &[6]), true);
    let w2 = store.add("w2", random_tensor(&mut rng, &[6, 3]), true);
    let b2 = store.add("b2", random_tensor(&mut rng, &[3]), true);
    let x = random_tensor(&mut rng, &[5, 4]);
    let y = random_tensor(&mut rng, &[5, 3]);
    let err = max_rel_error(&mut store, |g| {
        let xv = g.constant(x.clone());
        let (w1, b1, w2, b2) = (g.param(w1), g.param(b1), g.param(w2), g.param(b2));
        let h = g.matmul(xv, w1);
        let h = g.add_row(h, b1);
        let h = g.tanh(h);
        let o = g.matmul(h, w2);
        let o = g.add_row(o, b2);
        g.smooth_l1(o, &y, 1.0)
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", random_tensor(&mut rng, &[4, 8]), true);
    let b = store.add("b", random_tensor(&mut rng, &[4, 8]), true);
    let gamma = store.add("gamma", random_tensor(&mut rng, &[8]), true);
    let beta = store.add("beta", random_tensor(&mut rng, &[8]), true);
    let w = store.add("w", random_tensor(&mut rng, &[8, 8]), true);
    let target = random_tensor(&mut rng, &[3, 8]);
    let err = max_rel_error(&mut store, |g| {
        let (a, b, gamma, beta, w) = (g.param(a), g.param(b), g.param(gamma), g.param(beta), g.param(w));
        let x = g.layer_norm(a, gamma, beta, 1e-6);
        let x = g.gelu(x);
        let scores = g.matmul_nt(x, b);
        let scores = g.scale(scores, 0.5);
        let attn = g.softmax_rows(scores);
        let mixed = g.matmul(attn, b);
        let left = g.slice_cols(mixed, 0, 3);
        let right = g.slice_cols(mixed, 3, 5);
        let joined = g.concat_cols(&[right, left]);
        let joined = g.matmul(joined, w);
        let prod = g.mul(joined, a);
        let rows = g.gather_rows(prod, &[2, 0, 2]);
        let extra = g.gather_rows(a, &[1]);
        let stacked = g.concat_rows(&[rows, extra]);
        let top = g.gather_rows(stacked, &[0, 1, 3]);
        let l = g.smooth_l1(top, &target, 0.5);
        let m = g.mean(stacked);
        let s = g.add(l, m);
        let t = g.tanh(s);
        g.add(t, l)
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn l1_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", random_tensor(&mut rng, &[3, 5]), true);
    let target = random_tensor(&mut rng, &[3, 5]);
    let err = max_rel_error(&mut store, |g| {
        let a = g.param(a);
        g.l1(a, &target)
    });
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn float32_gradients_within_loose_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w64 = random_tensor(&mut rng, &[6, 4]);
    let x64 = random_tensor(&mut rng, &[3, 6]);
    let mut s32 = ParamStore::<f32>::new();
    let w = s32.add("w", w64.cast(), true);
    let mut g = Graph::new(&s32);
    let x = g.constant(x64.cast());
    let wv = g.param(w);
    let h = g.matmul(x, wv);
    let h = g.gelu(h);
    let loss = g.sum(h);
    let grads32 = g.backward(loss).unwrap();

    let mut s64 = ParamStore::<f64>::new();
    let w = s64.add("w", w64, true);
    let mut g = Graph::new(&s64);
    let x = g.constant(x64);
    let wv = g.param(w);
    let h = g.matmul(x, wv);
    let h = g.gelu(h);
    let loss = g.sum(h);
    let grads64 = g.backward(loss).unwrap();
    for (a, b) in grads32.get(w).unwrap().iter().zip(grads64.get(w).unwrap()) {
        assert!((*a as f64 - b).abs() <= 1e-3 * b.abs().max(1.0));
    }
}

#[test]
fn adamw_zero_gradient_zero_decay_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
    let before = store.get(p).value.clone();
    let mut opt = AdamW::new(&store, (0.9, 0.999), 1e-8);
    opt.step(&mut store, 1e-2, 0.0).unwrap();
    assert_eq!(store.get(p).value, before);
}

#[test]
fn adamw_first_step_moves_against_gradient_sign() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::from_f64(&[3], &[1.0, 1.0, 1.0]), true);
    store.get_mut(p).grad = Tensor::from_f64(&[3], &[0.5, -2.0, 1e-3]);
    let mut opt = AdamW::new(&store, (0.9, 0.999), 1e-8);
    opt.step(&mut store, 0.1, 0.0).unwrap();
    let v = store.get(p).value.data();
    // Bias-corrected first step is lr * g / (|g| + eps) ~= lr * sign(g).
    assert!((v[0] - 0.9).abs() < 1e-6);
    assert!((v[1] - 1.1).abs() < 1e-6);
    assert!((v[2] - 0.9).abs() < 1e-4);
}

#[test]
fn adamw_decoupled_decay_scales_value() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::from_f64(&[1, 2], &[2.0, -4.0]), true);
    let mut opt = AdamW::new(&store, (0.9, 0.999), 1e-8);
    opt.step(&mut store, 1.0, 0.1).unwrap();
    assert_eq!(store.get(p).value.data(), &[2.0 * 0.9, -4.0 * 0.9]);
}

#[test]
fn adamw_reports_overflow() {
    let mut store = ParamStore::<f32>::new();
    let p = store.add("p", Tensor::from_f64(&[1], &[f32::MAX as f64]), true);
    store.get_mut(p).grad = Tensor::from_f64(&[1], &[-1.0]);
    let mut opt = AdamW::new(&store, (0.9, 0.999), 1e-8);
    assert!(matches!(
        opt.step(&mut store, 1e38, 0.0),
        Err(NumericsError::NonFinite(_))
    ));
}

#[test]
fn lr_schedule_hits_table_values() {
    let cfg = OptimizerConfig::default();
    assert!((cfg.lr_at(0.0) - 5.0e-6).abs() < 1e-18);
    assert!((cfg.lr_at(10.0) - 5.0e-5).abs() < 1e-18);
    assert!((cfg.lr_at(100.0) - 5.0e-7).abs() < 1e-18);
    // continuity at the warmup boundary
    let below = cfg.lr_at(10.0 - 1e-9);
    let above = cfg.lr_at(10.0 + 1e-9);
    assert!((below - above).abs() < 1e-12);
}

#[test]
fn wd_schedule_is_monotone_between_endpoints() {
    let cfg = OptimizerConfig::default();
    assert!((cfg.wd_at(0.0) - 0.04).abs() < 1e-15);
    assert!((cfg.wd_at(100.0) - 0.4).abs() < 1e-15);
    let mid = cfg.wd_at(50.0);
    assert!(mid > 0.04 && mid < 0.4);
    let mut prev = cfg.wd_at(0.0);
    for e in 1..=100 {
        let cur = cfg.wd_at(e as f64);
        assert!(cur > prev);
        prev = cur;
    }
}

#[test]
fn config_validation_rejects_bad_rates() {
    let cfg = OptimizerConfig {
        start_lr: 1.0,
        ..OptimizerConfig::default()
    };
    assert!(cfg.validate().is_err());
    let cfg = OptimizerConfig {
        warmup_epochs: 200.0,
        ..OptimizerConfig::default()
    };
    assert!(cfg.validate().is_err());
    assert!(OptimizerConfig::default().validate().is_ok());
}

#[test]
fn checkpoint_rejects_truncation_and_restores_by_name() {
    let mut store = ParamStore::<f32>::new();
    store.add("student.w", Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
    let mut ckpt = Checkpoint::new(CheckpointMeta {
        config_hash: "abc".into(),
        epoch: 3,
        val_loss: Some(0.25),
        ..Default::default()
    });
    ckpt.push_store(&store);
    let bytes = ckpt.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());

    let mut teacher = ParamStore::<f64>::new();
    teacher.add("teacher.w", Tensor::zeros(&[2, 3]), false);
    Checkpoint::from_bytes(&bytes)
        .unwrap()
        .restore_into(&mut teacher, |n| n.replacen("teacher.", "student.", 1))
        .unwrap();
    assert_eq!(teacher.iter().next().unwrap().value.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
}

proptest! {
    #[test]
    fn checkpoint_roundtrip(values in prop::collection::vec(-1e6f64..1e6, 1..40), epoch in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::new(&[values.len()], values.clone()), true);
        let mut ckpt = Checkpoint::new(CheckpointMeta { epoch, ..Default::default() });
        ckpt.push_store(&store);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(&back, &ckpt);
        let restored = back.entries[0].to_tensor::<f64>();
        prop_assert_eq!(restored.data(), values.as_slice());
    }
}
