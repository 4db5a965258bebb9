//! Shared inputs for the benchmarks.

use floorgen_core::dataset::synth::synth_corpus;
use floorgen_core::denoiser::DenoiserConfig;
use floorgen_core::FloorPlan;

/// A mid-sized denoiser that keeps a benchmark iteration under a second.
pub fn bench_model_config() -> DenoiserConfig {
    DenoiserConfig {
        d_model: 128,
        n_encoders: 2,
        n_heads: 4,
        ff_dim: 512,
        dropout: 0.0,
        gat_heads: 4,
        head_hidden: [64, 32],
        row_positions: false,
    }
}

pub fn fixture_plans(n: usize) -> Vec<FloorPlan> {
    synth_corpus(n, 2024)
}
