//! Shared fixtures for the benchmarks.

use usjepa::frames::{synth_frame, SynthConfig, SynthSample};
use usjepa::model::ModelConfig;

pub fn desk_sample(seed: u64) -> SynthSample {
    synth_frame(0, seed, &SynthConfig::default()).expect("desk synth config is valid")
}

pub fn fan_sample(size: usize, seed: u64) -> SynthSample {
    let cfg = SynthConfig {
        height: size,
        width: size,
        ..SynthConfig::default()
    };
    synth_frame(1, seed, &cfg).expect("synth config is valid")
}

pub fn desk_model() -> ModelConfig {
    ModelConfig::desk()
}
