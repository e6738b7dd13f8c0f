use std::path::Path;

use usjepa::config::RunConfig;
use usjepa::corruption::{blur_kernel_side, contrast_alpha};
use usjepa::eval::ProbeConfig;
use usjepa::masking::MaskingConfig;
use usjepa::model::{ModelConfig, ModelStack, TeacherMode};
use usjepa::numerics::OptimizerConfig;
use usjepa::objective::{LossKind, TrainConfig};
use usjepa::sampling::DEFAULT_THRESHOLD;

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn pretraining_defaults() {
    let o = OptimizerConfig::default();
    assert_eq!((o.base_lr, o.start_lr, o.final_lr), (5.0e-5, 5.0e-6, 5.0e-7));
    assert_eq!((o.warmup_epochs, o.total_epochs), (10.0, 100.0));
    assert_eq!((o.wd_start, o.wd_final), (0.04, 0.4));

    let m = MaskingConfig::default();
    assert_eq!((m.context.count, m.context.scale_range), (1, (0.85, 1.0)));
    assert_eq!((m.target.count, m.target.scale_range), (4, (0.075, 0.125)));
    assert_eq!(m.target.aspect_range, (0.75, 1.5));
    assert_eq!((m.context.tau, m.target.tau), (10, 10));

    let t = TrainConfig::default();
    assert_eq!((t.batch_size, t.holdout_fraction), (128, 0.05));
    assert_eq!(t.loss.kind, LossKind::SmoothL1);
    assert_eq!(DEFAULT_THRESHOLD, 50_000);

    match TeacherMode::ema_default() {
        TeacherMode::Ema {
            momentum_start,
            momentum_end,
        } => assert_eq!((momentum_start, momentum_end), (0.996, 1.0)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn probe_defaults() {
    let p = ProbeConfig::default();
    assert_eq!((p.lr, p.weight_decay, p.batch_size), (1e-3, 1e-4, 32));
    assert_eq!((p.max_epochs, p.patience, p.seeds), (150, 15, 5));
}

#[test]
fn corruption_constants() {
    assert_eq!([1, 2, 3].map(blur_kernel_side), [5, 9, 13]);
    assert_eq!([1, 2, 3].map(|e| contrast_alpha(e).unwrap()), [0.7, 0.5, 0.3]);
}

#[test]
fn paper_config_file_matches_defaults() {
    let cfg = RunConfig::load(&configs().join("paper.toml")).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.data.input_size, 224);
}

#[test]
fn desk_config_file_is_the_desk_preset() {
    let cfg = RunConfig::load(&configs().join("desk.toml")).unwrap();
    let desk = ModelConfig::desk();
    assert_eq!(cfg.model.encoder, desk.encoder);
    assert_eq!(cfg.model.predictor.embed_dim, 32);
    assert_eq!((cfg.data.input_size, cfg.model.encoder.patch_size), (64, 8));
    assert_eq!(cfg.corpus.synthetic_count, 2000);
    assert_eq!(cfg.optimizer.total_epochs, 20.0);
    let text = cfg.to_toml();
    let back = RunConfig::from_toml(&text, &configs().join("desk.toml")).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn unknown_keys_are_rejected() {
    let err = RunConfig::from_toml("[optimizer]\nbase_lrr = 1.0\n", Path::new("x.toml")).unwrap_err();
    assert!(err.to_string().contains("base_lrr"), "{err}");
    assert!(RunConfig::from_toml("[data]\ninput_size = 60\n", Path::new("x.toml")).is_err());
}

/// ViT-B/16 encoder without class token or head.
fn vit_params(dim: usize, depth: usize, patch_pixels: usize, mlp: usize) -> usize {
    let block = 2 * (2 * dim) + (dim * 3 * dim + 3 * dim) + (dim * dim + dim) + (dim * mlp * dim + mlp * dim) + (mlp * dim * dim + dim);
    (patch_pixels * dim + dim) + depth * block + 2 * dim
}

#[test]
fn paper_preset_has_vit_base_shapes() {
    let cfg = ModelConfig::paper();
    let stack = ModelStack::<f32>::new(&cfg, 0).unwrap();
    let student: usize = stack
        .params
        .iter()
        .filter(|p| p.name.starts_with("student."))
        .map(|p| p.value.len())
        .sum();
    assert_eq!(student, vit_params(768, 12, 256, 4));
    // RGB ViT-B/16 without head or class token is 85,646,592; grayscale patches drop 512 * 768
    assert_eq!(student, 85_646_592 - 512 * 768);
    let teacher: usize = stack.teacher_params.iter().map(|p| p.value.len()).sum();
    assert_eq!(teacher, student);
    let adapter = stack.params.by_name("adapter.weight").unwrap();
    assert_eq!(adapter.value.shape(), &[384, 768]);
}
