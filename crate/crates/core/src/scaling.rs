//! Post-pretrain token scaling: planning which pre-trained resampler each
//! target scale starts from, and migrating parameters accordingly.
//!
//! New resamplers are full copies of an existing one. When the number of
//! queries per window changes, queries are laid out on a square grid and
//! each new query copies its nearest pre-trained neighbour.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assembly::{token_count, CosConfig, CosParams};
use crate::error::{CosError, Result};
use crate::numerics::Tensor;
use crate::resampler::resample_window;

/// Maximum output deviation accepted by [`functional_preservation_check`].
pub const PRESERVATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScaleMapping {
    /// Same query count and spatial extent as the source scale.
    Inherit(usize),
    /// A new scale initialized by inflating the given source scale.
    New(usize),
}

impl ScaleMapping {
    pub fn source(self) -> usize {
        match self {
            Self::Inherit(s) | Self::New(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalePlan {
    pub source: CosConfig,
    pub target: CosConfig,
    /// One entry per target scale.
    pub scale_map: Vec<ScaleMapping>,
    pub source_tokens: usize,
    pub target_tokens: usize,
    pub token_ratio: f64,
}

/// Window side as a fraction of the image side, kept as an exact ratio.
fn extent(cfg: &CosConfig, scale: usize) -> (usize, usize) {
    (cfg.scales[scale].window_size, cfg.feature_size())
}

fn same_extent(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 * b.1 == b.0 * a.1
}

fn log_extent_gap(a: (usize, usize), b: (usize, usize)) -> f64 {
    ((a.0 as f64 / a.1 as f64) / (b.0 as f64 / b.1 as f64)).ln().abs()
}

fn check_compatible(src: &CosConfig, tgt: &CosConfig) -> Result<()> {
    src.validate()?;
    tgt.validate()?;
    let mismatch = [
        ("channels", src.channels, tgt.channels),
        ("model_dim", src.model_dim, tgt.model_dim),
        ("heads", src.heads, tgt.heads),
        ("levels", src.levels, tgt.levels),
        ("out_dim", src.out_dim(), tgt.out_dim()),
    ]
    .into_iter()
    .find(|(_, a, b)| a != b);
    if let Some((field, a, b)) = mismatch {
        return Err(CosError::PlanMismatch(format!(
            "{field} differs between source ({a}) and target ({b})"
        )));
    }
    Ok(())
}

fn finish(src: &CosConfig, tgt: &CosConfig, scale_map: Vec<ScaleMapping>) -> Result<ScalePlan> {
    let source_tokens = token_count(src)?;
    let target_tokens = token_count(tgt)?;
    if target_tokens < source_tokens {
        return Err(CosError::PlanMismatch(format!(
            "target has fewer tokens ({target_tokens}) than source ({source_tokens})"
        )));
    }
    Ok(ScalePlan {
        source: src.clone(),
        target: tgt.clone(),
        scale_map,
        source_tokens,
        target_tokens,
        token_ratio: target_tokens as f64 / source_tokens as f64,
    })
}

/// Matches every target scale to the source scale with the same query
/// count and the nearest spatial extent (ties go to the coarser source).
pub fn plan_scale(src: &CosConfig, tgt: &CosConfig) -> Result<ScalePlan> {
    check_compatible(src, tgt)?;
    let mut scale_map = Vec::with_capacity(tgt.scales.len());
    for (ti, ts) in tgt.scales.iter().enumerate() {
        let te = extent(tgt, ti);
        let best = src
            .scales
            .iter()
            .enumerate()
            .filter(|(_, ss)| ss.queries_per_window == ts.queries_per_window)
            .map(|(si, _)| (si, log_extent_gap(te, extent(src, si))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(si, _)| si)
            .ok_or(CosError::UnmappableScale {
                target_scale: ti,
                queries: ts.queries_per_window,
            })?;
        scale_map.push(if same_extent(te, extent(src, best)) {
            ScaleMapping::Inherit(best)
        } else {
            ScaleMapping::New(best)
        });
    }
    finish(src, tgt, scale_map)
}

/// A plan with a caller-chosen mapping. Unlike [`plan_scale`] this allows a
/// new scale to change its query count.
pub fn plan_with_map(src: &CosConfig, tgt: &CosConfig, scale_map: Vec<ScaleMapping>) -> Result<ScalePlan> {
    check_compatible(src, tgt)?;
    if scale_map.len() != tgt.scales.len() {
        return Err(CosError::PlanMismatch(format!(
            "{} mappings for {} target scales",
            scale_map.len(),
            tgt.scales.len()
        )));
    }
    for (ti, m) in scale_map.iter().enumerate() {
        let si = m.source();
        if si >= src.scales.len() {
            return Err(CosError::PlanMismatch(format!(
                "target scale {ti} maps to missing source scale {si}"
            )));
        }
        if let ScaleMapping::Inherit(_) = m {
            let same_n = src.scales[si].queries_per_window == tgt.scales[ti].queries_per_window;
            if !same_n || !same_extent(extent(tgt, ti), extent(src, si)) {
                return Err(CosError::PlanMismatch(format!(
                    "target scale {ti} cannot inherit source scale {si}: extent or query count differs"
                )));
            }
        }
    }
    finish(src, tgt, scale_map)
}

fn integer_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// For each of `n_target` queries on a √n×√n grid, the index of the nearest
/// of `n_source` queries on their own grid, both grids spanning the unit
/// square. Ties go to the lower source index.
pub fn nearest_query_map(n_source: usize, n_target: usize) -> Result<Vec<usize>> {
    let (Some(gs), Some(gt)) = (integer_sqrt(n_source), integer_sqrt(n_target)) else {
        return Err(CosError::PlanMismatch(format!(
            "nearest-neighbour query init needs square query counts, got {n_source} -> {n_target}"
        )));
    };
    // centres scaled by 2·gs·gt: target (2i+1)·gs, source (2a+1)·gt
    let coord_t = |i: usize| ((2 * i + 1) * gs) as i64;
    let coord_s = |a: usize| ((2 * a + 1) * gt) as i64;
    let mut out = Vec::with_capacity(n_target);
    for ti in 0..gt {
        for tj in 0..gt {
            let mut best = (i64::MAX, 0);
            for si in 0..gs {
                for sj in 0..gs {
                    let di = coord_t(ti) - coord_s(si);
                    let dj = coord_t(tj) - coord_s(sj);
                    let d = di * di + dj * dj;
                    if d < best.0 {
                        best = (d, si * gs + sj);
                    }
                }
            }
            out.push(best.1);
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize of an `L×L×C` grid to `new_size×new_size×C`.
pub fn resize_nearest(grid: &Tensor, new_size: usize) -> Result<Tensor> {
    let &[l, l2, c] = grid.shape() else {
        return Err(CosError::PlanMismatch(format!(
            "cannot resize shape {:?}",
            grid.shape()
        )));
    };
    if l != l2 || new_size == 0 {
        return Err(CosError::PlanMismatch(format!(
            "cannot resize {l}×{l2} to {new_size}"
        )));
    }
    let src_index = |i: usize| ((2 * i + 1) * l) / (2 * new_size);
    let mut data = Vec::with_capacity(new_size * new_size * c);
    for i in 0..new_size {
        for j in 0..new_size {
            let (si, sj) = (src_index(i), src_index(j));
            let start = (si * l + sj) * c;
            data.extend_from_slice(&grid.data()[start..start + c]);
        }
    }
    Tensor::new([new_size, new_size, c], data)
}

/// Builds target parameters: inherited and new scales copy their source
/// resampler, queries are re-gridded when the count changes, and the
/// positional embedding is resized to the new feature grid.
pub fn migrate_params(src: &CosParams, plan: &ScalePlan) -> Result<CosParams> {
    src.check_against(&plan.source)
        .map_err(|e| CosError::PlanMismatch(format!("source parameters do not match plan: {e}")))?;
    if plan.scale_map.len() != plan.target.scales.len() {
        return Err(CosError::PlanMismatch("scale map length".into()));
    }
    let pos_embed = resize_nearest(&src.pos_embed, plan.target.feature_size())?;
    let scales = plan
        .scale_map
        .iter()
        .zip(&plan.target.scales)
        .map(|(m, ts)| {
            let mut p = src.scales[m.source()].clone();
            let n_src = p.num_queries();
            let n_tgt = ts.queries_per_window;
            if n_src != n_tgt {
                let map = nearest_query_map(n_src, n_tgt)?;
                let d = p.dim();
                let mut data = Vec::with_capacity(n_tgt * d);
                for &k in &map {
                    data.extend_from_slice(p.queries.row(k));
                }
                p.queries = Tensor::new([n_tgt, d], data)?;
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = CosParams {
        pos_embed,
        scales,
        out_proj: src.out_proj.clone(),
    };
    out.check_against(&plan.target)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PreservationStatus {
    /// Source and target resamplers agree within tolerance.
    Preserved {
        max_deviation: f64,
    },
    /// Query count changed, so outputs are expected to differ.
    ApproximateInit,
    Diverged {
        max_deviation: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalePreservation {
    pub target_scale: usize,
    pub mapping: ScaleMapping,
    pub status: PreservationStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreservationReport {
    pub scales: Vec<ScalePreservation>,
    pub passed: bool,
}

/// Feeds identical random window features (sized for the target scale) to
/// each target resampler and to the source resampler it was built from.
pub fn functional_preservation_check(
    src: &CosParams,
    tgt: &CosParams,
    plan: &ScalePlan,
    seed: u64,
) -> Result<PreservationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = plan.target.channels;
    let mut scales = Vec::with_capacity(plan.scale_map.len());
    for (ti, &mapping) in plan.scale_map.iter().enumerate() {
        let sp = &src.scales[mapping.source()];
        let tp = &tgt.scales[ti];
        let status = if sp.num_queries() != tp.num_queries() {
            PreservationStatus::ApproximateInit
        } else {
            let w = plan.target.scales[ti].window_size;
            let windows: Vec<Tensor> = (0..plan.target.levels)
                .map(|_| Tensor::randn([w * w, channels], 1.0, &mut rng))
                .collect();
            let a = resample_window(sp, &windows)?;
            let b = resample_window(tp, &windows)?;
            let dev = a.max_abs_diff(&b);
            if dev <= PRESERVATION_TOL {
                PreservationStatus::Preserved { max_deviation: dev }
            } else {
                PreservationStatus::Diverged { max_deviation: dev }
            }
        };
        scales.push(ScalePreservation {
            target_scale: ti,
            mapping,
            status,
        });
    }
    let passed = scales
        .iter()
        .all(|s| !matches!(s.status, PreservationStatus::Diverged { .. }));
    Ok(PreservationReport { scales, passed })
}
