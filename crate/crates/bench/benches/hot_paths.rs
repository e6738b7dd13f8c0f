use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use usjepa::corruption::{corrupt, CorruptionKind, CorruptionSpec};
use usjepa::masking::{sample_mask_set, MaskingConfig, PatchGrid};
use usjepa::model::ModelStack;
use usjepa::numerics::Graph;
use usjepa::objective::{sample_loss, LossConfig};
use usjepa::rng::rng_for;
use usjepa_bench::{desk_model, desk_sample, fan_sample};

fn encoder(c: &mut Criterion) {
    let stack = ModelStack::<f32>::new(&desk_model(), 0).unwrap();
    let s = desk_sample(3);
    let grid = stack.grid_for(&s.frame).unwrap();
    let mut masking = MaskingConfig::default();
    masking.target.tau = 2;
    let masks = sample_mask_set(&grid, Some(&s.region), &masking, &mut rng_for(1, &[0])).unwrap();
    let s_y = stack.encode_target(&s.frame, &grid).unwrap();

    c.bench_function("desk_encoder_forward", |b| {
        b.iter(|| stack.pooled_features(black_box(&s.frame)).unwrap())
    });
    c.bench_function("desk_sample_loss_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new(&stack.params);
            let loss = sample_loss(&stack, &mut g, &s.frame, &grid, &masks, &s_y, &LossConfig::default()).unwrap();
            g.backward(loss).unwrap()
        })
    });
}

fn masking(c: &mut Criterion) {
    let s = fan_sample(224, 5);
    let grid = PatchGrid::new(224, 224, 16).unwrap();
    let cfg = MaskingConfig::default();
    let mut rng = rng_for(2, &[0]);
    c.bench_function("mask_set_224_usrc", |b| {
        b.iter(|| sample_mask_set(&grid, Some(black_box(&s.region)), &cfg, &mut rng))
    });
}

fn corruptions(c: &mut Criterion) {
    let s = fan_sample(224, 9);
    let mut group = c.benchmark_group("corrupt_224");
    for kind in CorruptionKind::ALL {
        let spec = CorruptionSpec::new(kind, 3, 4).unwrap();
        group.bench_function(kind.name(), |b| {
            b.iter(|| corrupt(black_box(&s.frame), &s.region, &spec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, encoder, masking, corruptions);
criterion_main!(benches);
