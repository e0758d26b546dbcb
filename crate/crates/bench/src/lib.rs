//! Fixtures shared by the benchmarks.

use vidcompress::{RunConfig, SyntheticVideoSpec, Tensor, VidCompress};

/// Default model settings with a fixed seed.
pub fn config(memory_size: usize) -> RunConfig {
    RunConfig {
        memory_size,
        seed: 7,
        ..RunConfig::default()
    }
}

pub fn model(cfg: &RunConfig) -> VidCompress<f32> {
    VidCompress::new(cfg.model(), cfg.seed).expect("default config is valid")
}

/// One clip of synthetic features for `cfg`.
pub fn clip(cfg: &RunConfig, index: usize) -> Tensor<f32> {
    let mut spec = SyntheticVideoSpec::new((index + 1) * cfg.clip_size, cfg.d, cfg.seed);
    spec.grid = cfg.grid;
    spec.frames_range(index * cfg.clip_size, cfg.clip_size)
        .expect("range lies inside the video")
}
