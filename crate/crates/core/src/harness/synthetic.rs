//! Synthetic regression data for exercising the bridge end to end.
//!
//! Each level of a sample is a shared block-constant signal plus
//! independent Gaussian noise. The signal lives on a `g×g` block grid that
//! does not depend on resolution, so the same seed describes the same
//! "image" at 224 and 448 px. The target for token `q` of a window is
//! `A·m + b[N, q]`, where `m` is the window's mean feature over cells and
//! levels, `A` is shared, and `b` depends only on the scale's query count
//! `N` and the query index. Scales that share `N` therefore share targets,
//! which keeps the task consistent across a scale migration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assembly::{token_count, CosConfig};
use crate::error::{CosError, Result};
use crate::harness::config::TaskConfig;
use crate::numerics::Tensor;
use crate::resampler::LevelStack;
use crate::windowing::{all_window_cells, FeatureMap};

#[derive(Debug, Clone)]
pub struct Sample {
    pub input: LevelStack,
    /// `N×D_out`, rows in token order.
    pub target: Tensor,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn shared_map(task: &TaskConfig, channels: usize, out_dim: usize) -> Tensor {
    let mut rng = rng_for(task.target_seed, 0);
    Tensor::randn([channels, out_dim], 1.0 / (channels as f64).sqrt(), &mut rng)
}

pub fn query_offset(task: &TaskConfig, queries: usize, query: usize, out_dim: usize) -> Tensor {
    let stream = 1 + ((queries as u64) << 32 | query as u64);
    Tensor::randn([out_dim], 1.0, &mut rng_for(task.target_seed, stream))
}

fn check_task(task: &TaskConfig, cfg: &CosConfig) -> Result<()> {
    cfg.validate()?;
    let l = cfg.feature_size();
    if task.signal_grid == 0 || !l.is_multiple_of(task.signal_grid) {
        return Err(CosError::Document(format!(
            "task.signal_grid {} must divide the feature size {l}",
            task.signal_grid
        )));
    }
    Ok(())
}

fn feature_maps(task: &TaskConfig, cfg: &CosConfig, index: usize) -> Vec<FeatureMap> {
    let (l, c, g) = (cfg.feature_size(), cfg.channels, task.signal_grid);
    let block = l / g;
    let sample = index as u64;
    let signal = Tensor::randn([g * g, c], 1.0, &mut rng_for(task.data_seed, 2 * sample));
    let mut noise_rng = rng_for(task.data_seed, 2 * sample + 1);
    (0..cfg.levels)
        .map(|_| {
            let noise = Tensor::randn([l, l, c], task.noise_std, &mut noise_rng);
            let mut map = FeatureMap::new(noise).expect("rank-3 square tensor");
            for i in 0..l {
                for j in 0..l {
                    let s = signal.row((i / block) * g + j / block);
                    for (x, v) in map.cell_mut(i, j).iter_mut().zip(s) {
                        *x += v;
                    }
                }
            }
            map
        })
        .collect()
}

fn targets(task: &TaskConfig, cfg: &CosConfig, maps: &[FeatureMap]) -> Result<Tensor> {
    let (l, c, d) = (cfg.feature_size(), cfg.channels, cfg.out_dim());
    let a = shared_map(task, c, d);
    let flat: Vec<Tensor> = maps.iter().map(FeatureMap::flattened).collect();
    let mut data = Vec::with_capacity(token_count(cfg)? * d);
    for spec in &cfg.scales {
        let n = spec.queries_per_window;
        let offsets: Vec<Tensor> = (0..n).map(|q| query_offset(task, n, q, d)).collect();
        for cells in all_window_cells(l, spec.window_size)? {
            let mut mean = vec![0.0; c];
            for f in &flat {
                for &cell in &cells {
                    for (m, v) in mean.iter_mut().zip(f.row(cell)) {
                        *m += v;
                    }
                }
            }
            let count = (cells.len() * flat.len()) as f64;
            let mean = Tensor::new([1, c], mean.into_iter().map(|m| m / count).collect())?;
            let projected = mean.matmul(&a)?;
            for off in &offsets {
                data.extend(projected.data().iter().zip(off.data()).map(|(p, o)| p + o));
            }
        }
    }
    let rows = data.len() / d;
    Tensor::new([rows, d], data)
}

pub fn sample(task: &TaskConfig, cfg: &CosConfig, index: usize) -> Result<Sample> {
    check_task(task, cfg)?;
    let maps = feature_maps(task, cfg, index);
    let target = targets(task, cfg, &maps)?;
    Ok(Sample {
        input: LevelStack::new(maps)?,
        target,
    })
}

/// Pure Gaussian features with no planted signal.
pub fn gaussian_input(cfg: &CosConfig, seed: u64) -> Result<LevelStack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = cfg.feature_size();
    let maps = (0..cfg.levels)
        .map(|_| FeatureMap::new(Tensor::randn([l, l, cfg.channels], 1.0, &mut rng)))
        .collect::<Result<Vec<_>>>()?;
    LevelStack::new(maps)
}

pub fn dataset(task: &TaskConfig, cfg: &CosConfig, count: usize) -> Result<Vec<Sample>> {
    (0..count).map(|i| sample(task, cfg, i)).collect()
}
