//! Shared fixtures for the benchmarks.

use cos_core::assembly::{CosConfig, CosParams};
use cos_core::harness::config::RunConfig;
use cos_core::harness::synthetic::gaussian_input;
use cos_core::resampler::LevelStack;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A preset with small channel and model widths.
pub fn narrow(cfg: CosConfig) -> CosConfig {
    cfg.with_dims(8, 16, 2).with_out_dim(8)
}

pub fn fixture(cfg: &CosConfig, seed: u64) -> (CosParams, LevelStack) {
    let params = CosParams::random(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid config");
    let input = gaussian_input(cfg, seed).expect("valid config");
    (params, input)
}

pub fn run(cfg: CosConfig, batch: usize) -> RunConfig {
    let mut rc = RunConfig::new(cfg);
    rc.batch = batch;
    rc
}
