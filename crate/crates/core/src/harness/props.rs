//! Runtime property suites. Each check is independent; a failing or
//! erroring check becomes a report entry rather than an error.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assembly::{forward, forward_on_tape, token_count, CosConfig, CosParams};
use crate::cost_model::{
    fit_cost_params, step_time, walltime, CostParams, CALIBRATION_POINTS, REFERENCE_TIMES,
};
use crate::error::Result;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::synthetic::gaussian_input;
use crate::harness::train::{pipeline, train};
use crate::numerics::{grad_check, grad_check_sampled, GradCheckReport, Tape, Tensor, Var};
use crate::presets::{self, SCALING_PLANS, SCALING_TABLE};
use crate::resampler::{
    resample_scale, resample_window, resample_window_with_attention, LevelStack, ResamplerParams,
};
use crate::scaling::{
    functional_preservation_check, migrate_params, plan_scale, PreservationStatus, PRESERVATION_TOL,
};
use crate::windowing::{partition, unpartition, window_cells, FeatureMap};

pub const SUITES: [&str; 11] = [
    "numerics",
    "counts",
    "roundtrip",
    "locality",
    "gradcheck",
    "ordering",
    "plans",
    "migration",
    "cost",
    "checkpoint",
    "training",
];

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyReport {
    pub seed: u64,
    pub results: Vec<PropertyResult>,
    pub passed: bool,
    pub seconds: f64,
}

impl PropertyReport {
    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

struct Runner {
    suite: &'static str,
    results: Vec<PropertyResult>,
}

impl Runner {
    fn check(&mut self, name: impl Into<String>, f: impl FnOnce() -> Result<(bool, String)>) {
        let start = Instant::now();
        let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        self.results.push(PropertyResult {
            suite: self.suite.to_string(),
            name: name.into(),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

/// Runs one suite, or all of them for `None` / `"all"`.
pub fn run_properties(selector: Option<&str>, seed: u64) -> PropertyReport {
    let start = Instant::now();
    let chosen: Vec<&'static str> = match selector {
        None | Some("all") => SUITES.to_vec(),
        Some(s) => SUITES.iter().copied().filter(|&x| x == s).collect(),
    };
    let mut results = Vec::new();
    if chosen.is_empty() {
        results.push(PropertyResult {
            suite: selector.unwrap_or_default().to_string(),
            name: "known suite".into(),
            passed: false,
            detail: format!("unknown suite; expected one of {}", SUITES.join(", ")),
            seconds: 0.0,
        });
    }
    for suite in chosen {
        let mut r = Runner {
            suite,
            results: Vec::new(),
        };
        match suite {
            "numerics" => numerics(&mut r, seed),
            "counts" => counts(&mut r),
            "roundtrip" => roundtrip(&mut r, seed),
            "locality" => locality(&mut r, seed),
            "gradcheck" => gradcheck(&mut r, seed),
            "ordering" => ordering(&mut r, seed),
            "plans" => plans(&mut r, seed),
            "migration" => migration(&mut r, seed),
            "cost" => cost(&mut r),
            "checkpoint" => checkpoint(&mut r, seed),
            "training" => training(&mut r, seed),
            _ => unreachable!("suite list and dispatch agree"),
        }
        results.extend(r.results);
    }
    PropertyReport {
        seed,
        passed: results.iter().all(|r| r.passed),
        results,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(salt);
    r
}

fn small_dims(cfg: CosConfig) -> CosConfig {
    cfg.with_dims(4, 8, 2)
}

/// Reverse-mode vs central differences for the full bridge on random
/// Gaussian input, with a loss that weights every output differently.
pub fn forward_grad_check(cfg: &CosConfig, seed: u64, max_entries: Option<usize>) -> Result<GradCheckReport> {
    cfg.validate()?;
    let params = CosParams::random(cfg, &mut rng(seed, 1))?;
    let input = gaussian_input(cfg, seed)?;
    let flat: Vec<Tensor> = input.levels().iter().map(FeatureMap::flattened).collect();
    let weights = Tensor::randn([token_count(cfg)?, cfg.out_dim()], 1.0, &mut rng(seed, 2));
    grad_check_sampled(
        |tape: &mut Tape, vars: &[Var]| {
            let bound = params.bind_vars(vars)?;
            let levels = flat
                .iter()
                .map(|f| tape.leaf(f.clone()))
                .collect::<Result<Vec<_>>>()?;
            let out = forward_on_tape(tape, cfg, &bound, &levels)?;
            let w = tape.leaf(weights.clone())?;
            let weighted = tape.mul(out, w)?;
            let sq = tape.mul(weighted, out)?;
            tape.mean(sq)
        },
        &params.flat_tensors(),
        1e-5,
        1e-3,
        max_entries,
        seed,
    )
}

/// The config used for the end-to-end gradient check: two scales, two
/// feature levels, every parameter checked.
pub fn gradcheck_config() -> CosConfig {
    CosConfig::new(56, &[(4, 2), (2, 1)])
        .with_dims(3, 4, 2)
        .with_levels(2)
        .with_out_dim(3)
}

fn numerics(r: &mut Runner, seed: u64) {
    r.check("matmul associativity within 1e-9 relative", || {
        let mut g = rng(seed, 10);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let (m, k, n, p) = (
                g.random_range(1..7),
                g.random_range(1..7),
                g.random_range(1..7),
                g.random_range(1..7),
            );
            let a = Tensor::randn([m, k], 1.0, &mut g);
            let b = Tensor::randn([k, n], 1.0, &mut g);
            let c = Tensor::randn([n, p], 1.0, &mut g);
            let left = a.matmul(&b)?.matmul(&c)?;
            let right = a.matmul(&b.matmul(&c)?)?;
            let scale = left.data().iter().fold(1.0f64, |s, x| s.max(x.abs()));
            worst = worst.max(left.max_abs_diff(&right) / scale);
        }
        Ok((worst <= 1e-9, format!("max relative deviation {worst:.3e}")))
    });
    r.check("softmax rows sum to 1", || {
        let mut g = rng(seed, 11);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let x = Tensor::randn([g.random_range(1..6), g.random_range(1..9)], 10.0, &mut g);
            let s = x.softmax_rows()?;
            for i in 0..s.rows() {
                worst = worst.max((s.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok((worst <= 1e-9, format!("max |row sum - 1| {worst:.3e}")))
    });

    type OpCase = (
        &'static str,
        Vec<Vec<usize>>,
        fn(&mut Tape, &[Var]) -> Result<Var>,
    );
    let cases: Vec<OpCase> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![2, 3]], |t, v| t.scale(v[0], -1.7)),
        ("softmax_rows", vec![vec![3, 4]], |t, v| t.softmax_rows(v[0])),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("gelu", vec![vec![2, 5]], |t, v| t.gelu(v[0])),
        ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("transpose", vec![vec![2, 5]], |t, v| t.transpose(v[0])),
        ("gather_rows", vec![vec![4, 3]], |t, v| {
            t.gather_rows(v[0], &[2, 0, 2])
        }),
        ("slice_cols", vec![vec![3, 5]], |t, v| t.slice_cols(v[0], 1, 4)),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, v| {
            t.concat_rows(&[v[0], v[1]])
        }),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |t, v| {
            t.concat_cols(&[v[0], v[1]])
        }),
        ("mean", vec![vec![3, 3]], |t, v| t.mean(v[0])),
    ];
    for (k, (name, shapes, op)) in cases.into_iter().enumerate() {
        r.check(format!("{name} gradient within 1e-4"), || {
            let mut g = rng(seed, 100 + k as u64);
            let params: Vec<Tensor> = shapes
                .iter()
                .map(|s| Tensor::randn(s.clone(), 1.0, &mut g))
                .collect();
            let out_shape = {
                let mut t = Tape::new();
                let v = params
                    .iter()
                    .map(|p| t.leaf(p.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let o = op(&mut t, &v)?;
                t.value(o).shape().to_vec()
            };
            let w = Tensor::randn(out_shape, 1.0, &mut g);
            let rep = grad_check(
                |t, v| {
                    let o = op(t, v)?;
                    let wv = t.leaf(w.clone())?;
                    let p = t.mul(o, wv)?;
                    t.mean(p)
                },
                &params,
                1e-6,
                1e-4,
            )?;
            Ok((
                rep.passed,
                format!("max relative error {:.3e}", rep.max_rel_error),
            ))
        });
    }
}

fn counts(r: &mut Runner) {
    for p in SCALING_TABLE.iter().filter(|p| p.name != "baseline-448") {
        r.check(format!("{} = {}", p.name, p.tokens), || {
            let n = token_count(&p.config())?;
            Ok((n == p.tokens, format!("{}/{:?} -> {n}", p.resolution, p.scales)))
        });
    }
}

fn roundtrip(r: &mut Runner, seed: u64) {
    for l in [1usize, 6, 12, 16, 32] {
        for w in (1..=l).filter(|w| l % w == 0) {
            r.check(format!("L={l} W={w}"), || {
                let c = 3;
                let x = FeatureMap::new(Tensor::randn(
                    [l, l, c],
                    1.0,
                    &mut rng(seed, (l * 100 + w) as u64),
                ))?;
                let wf = partition(&x, w)?;
                let back = unpartition(&wf)?;
                let identical = back
                    .tensor()
                    .data()
                    .iter()
                    .zip(x.tensor().data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                // every cell sits in exactly the window its coordinates imply
                let mut located = true;
                for i in 0..l {
                    for j in 0..l {
                        let k = (i / w) * (l / w) + j / w;
                        let pos = (i % w) * w + j % w;
                        located &= wf.windows[k].row(pos) == x.cell(i, j);
                    }
                }
                let mut a: Vec<u64> = x.tensor().data().iter().map(|v| v.to_bits()).collect();
                let mut b: Vec<u64> = wf
                    .windows
                    .iter()
                    .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                    .collect();
                a.sort_unstable();
                b.sort_unstable();
                Ok((
                    identical && located && a == b,
                    format!("identity {identical}, location {located}, multiset {}", a == b),
                ))
            });
        }
    }
}

/// Indices of the token rows belonging to (scale, window).
fn window_rows(cfg: &CosConfig, scale: usize, window: usize) -> Vec<usize> {
    crate::assembly::provenance(cfg)
        .iter()
        .enumerate()
        .filter(|(_, p)| p.scale == scale && p.window == window)
        .map(|(i, _)| i)
        .collect()
}

fn locality(r: &mut Runner, seed: u64) {
    r.check(
        "default config: outside perturbation leaves window tokens unchanged (50 trials)",
        || {
            let cfg = CosConfig::default_pretrain();
            let l = cfg.feature_size();
            let mut g = rng(seed, 20);
            let params = CosParams::random(&cfg, &mut g)?;
            let mut changed = 0usize;
            for trial in 0..50 {
                let input = gaussian_input(&cfg, seed.wrapping_add(trial))?;
                let base = forward(&cfg, &params, &input)?;
                for (s, spec) in cfg.scales.iter().enumerate() {
                    let per_side = l / spec.window_size;
                    let window = g.random_range(0..per_side * per_side);
                    let inside: HashSet<usize> =
                        window_cells(l, spec.window_size, window / per_side, window % per_side)
                            .into_iter()
                            .collect();
                    let zero_outside = trial % 2 == 0;
                    let levels = input
                        .levels()
                        .iter()
                        .map(|m| {
                            let mut t = m.tensor().clone();
                            let c = cfg.channels;
                            for cell in (0..l * l).filter(|x| !inside.contains(x)) {
                                for v in &mut t.data_mut()[cell * c..(cell + 1) * c] {
                                    *v = if zero_outside {
                                        0.0
                                    } else {
                                        g.random::<f64>() * 10.0 - 5.0
                                    };
                                }
                            }
                            FeatureMap::new(t)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let out = forward(&cfg, &params, &LevelStack::new(levels)?)?;
                    for row in window_rows(&cfg, s, window) {
                        if base
                            .tokens
                            .row(row)
                            .iter()
                            .zip(out.tokens.row(row))
                            .any(|(a, b)| a.to_bits() != b.to_bits())
                        {
                            changed += 1;
                        }
                    }
                }
            }
            Ok((changed == 0, format!("{changed} token rows changed")))
        },
    );

    r.check("window permutation permutes token blocks", || {
        let mut g = rng(seed, 21);
        let p = ResamplerParams::random(3, 5, 8, 2, 1, &mut g)?;
        let x = FeatureMap::new(Tensor::randn([8, 8, 5], 1.0, &mut g))?;
        let wf = partition(&x, 4)?;
        let base = resample_scale(&p, std::slice::from_ref(&wf))?;
        let mut order: Vec<usize> = (0..wf.windows.len()).collect();
        order.shuffle(&mut g);
        if order.windows(2).all(|w| w[0] < w[1]) {
            order.reverse();
        }
        let mut shuffled = wf.clone();
        shuffled.windows = order.iter().map(|&k| wf.windows[k].clone()).collect();
        let out = resample_scale(&p, &[shuffled])?;
        let n = p.num_queries();
        let ok = order
            .iter()
            .enumerate()
            .all(|(pos, &k)| (0..n).all(|q| out.tokens.row(pos * n + q) == base.tokens.row(k * n + q)));
        Ok((ok, format!("order {order:?}")))
    });

    r.check("attention rows sum to 1 within 1e-9", || {
        let mut g = rng(seed, 22);
        let p = ResamplerParams::random(4, 3, 8, 2, 2, &mut g)?;
        let win: Vec<Tensor> = (0..2).map(|_| Tensor::randn([9, 3], 3.0, &mut g)).collect();
        let (_, maps) = resample_window_with_attention(&p, &win)?;
        let worst = maps
            .iter()
            .flat_map(|m| (0..m.rows()).map(move |i| (m.row(i).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0f64, f64::max);
        Ok((
            worst <= 1e-9 && maps.len() == 4,
            format!("{} maps, max deviation {worst:.3e}", maps.len()),
        ))
    });

    r.check("single level equals one cross-attention block", || {
        // with norms off, zero MLP and identity projections the block is
        // q + softmax(q·xᵀ/√d)·x
        let mut g = rng(seed, 23);
        let d = 4;
        let mut p = ResamplerParams::random(2, d, d, 1, 1, &mut g)?;
        p.layer_norm = false;
        p.feat_proj = Tensor::eye(d);
        let b = &mut p.blocks[0];
        for m in [&mut b.q_proj, &mut b.k_proj, &mut b.v_proj, &mut b.o_proj] {
            *m = Tensor::eye(d);
        }
        b.mlp_out = Tensor::zeros(b.mlp_out.shape());
        let x = Tensor::randn([6, d], 1.0, &mut g);
        let out = resample_window(&p, std::slice::from_ref(&x))?;
        let scores = p.queries.matmul(&x.transpose()?)?.map(|v| v / (d as f64).sqrt());
        let expected = p
            .queries
            .zip_with(&scores.softmax_rows()?.matmul(&x)?, "oracle", |a, b| a + b)?;
        let dev = out.max_abs_diff(&expected);
        Ok((dev <= 1e-12, format!("max deviation {dev:.3e}")))
    });
}

fn gradcheck(r: &mut Runner, seed: u64) {
    r.check("resample_scale, 2 levels, within 1e-3", || {
        let mut g = rng(seed, 30);
        let p = ResamplerParams::random(2, 3, 4, 2, 2, &mut g)?;
        let maps: Vec<Tensor> = (0..2).map(|_| Tensor::randn([4, 3], 1.0, &mut g)).collect();
        let named: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        let rep = grad_check(
            |t, v| {
                let bound =
                    crate::resampler::BoundResampler::from_vars(v.to_vec(), p.heads, p.dim(), p.layer_norm);
                let mut outs = Vec::new();
                // two 2×2 windows of a 4-cell map: rows {0,1} and {2,3}
                for rows in [[0usize, 1], [2, 3]] {
                    let lv = maps
                        .iter()
                        .map(|m| {
                            let leaf = t.leaf(m.clone())?;
                            t.gather_rows(leaf, &rows)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    outs.push(bound.window(t, &lv)?);
                }
                let all = t.concat_rows(&outs)?;
                let sq = t.mul(all, all)?;
                t.mean(sq)
            },
            &named,
            1e-5,
            1e-3,
        )?;
        Ok((
            rep.passed,
            format!(
                "{} entries, max relative error {:.3e}",
                rep.checked, rep.max_rel_error
            ),
        ))
    });
    r.check(
        "end-to-end 2-scale 2-level bridge, all parameters, within 1e-3",
        || {
            let rep = forward_grad_check(&gradcheck_config(), seed, None)?;
            Ok((
                rep.passed,
                format!(
                    "{} entries, max relative error {:.3e}",
                    rep.checked, rep.max_rel_error
                ),
            ))
        },
    );
}

/// A random valid config on a small grid.
pub fn random_config<R: Rng + ?Sized>(g: &mut R) -> CosConfig {
    let l = [2usize, 4, 6, 8, 12, 16][g.random_range(0..6)];
    let mut divisors: Vec<usize> = (1..=l).filter(|w| l.is_multiple_of(*w)).collect();
    divisors.shuffle(g);
    let count = g.random_range(1..=3.min(divisors.len()));
    let mut windows: Vec<usize> = divisors[..count].to_vec();
    windows.sort_unstable_by(|a, b| b.cmp(a));
    let scales: Vec<(usize, usize)> = windows.into_iter().map(|w| (w, g.random_range(1..=4))).collect();
    CosConfig::new(14 * l, &scales)
        .with_dims(g.random_range(1..=3), 4, [1, 2, 4][g.random_range(0..3)])
        .with_levels(g.random_range(1..=2))
        .with_out_dim(g.random_range(1..=3))
}

fn ordering(r: &mut Runner, seed: u64) {
    r.check(
        "100 fuzzed configs: coarse-to-fine provenance and length == token_count",
        || {
            let mut g = rng(seed, 40);
            let mut bad = Vec::new();
            for trial in 0..100 {
                let cfg = random_config(&mut g);
                let params = CosParams::random(&cfg, &mut g)?;
                let out = forward(&cfg, &params, &gaussian_input(&cfg, trial)?)?;
                let ordered = out
                    .provenance
                    .windows(2)
                    .all(|w| w[0].window_size >= w[1].window_size);
                if !ordered || out.len() != token_count(&cfg)? || out.tokens.rows() != out.len() {
                    bad.push(trial);
                }
            }
            Ok((bad.is_empty(), format!("failing trials {bad:?}")))
        },
    );
}

fn enumerated_tokens(l: usize, scales: &[(usize, usize)]) -> usize {
    scales
        .iter()
        .map(|&(w, n)| {
            let windows: HashSet<(usize, usize)> =
                (0..l).flat_map(|i| (0..l).map(move |j| (i / w, j / w))).collect();
            windows.len() * n
        })
        .sum()
}

fn plans(r: &mut Runner, seed: u64) {
    for (src, tgt) in SCALING_PLANS {
        r.check(format!("{} -> {}", src.name, tgt.name), || {
            let plan = plan_scale(&small_dims(src.config()), &small_dims(tgt.config()))?;
            let exact = enumerated_tokens(32, tgt.scales) as f64 / enumerated_tokens(16, src.scales) as f64;
            let ok = plan.source_tokens == src.tokens
                && plan.target_tokens == tgt.tokens
                && plan.token_ratio == exact
                && plan.token_ratio >= 16.0;
            Ok((
                ok,
                format!(
                    "{} -> {} tokens, ratio {:.4} ({:?})",
                    plan.source_tokens, plan.target_tokens, plan.token_ratio, plan.scale_map
                ),
            ))
        });
    }
    r.check("resolution alone keeps the token count", || {
        let plan = plan_scale(
            &small_dims(SCALING_TABLE[0].config()),
            &small_dims(SCALING_TABLE[1].config()),
        )?;
        Ok((plan.token_ratio == 1.0, format!("{:?}", plan.scale_map)))
    });
    r.check("compound ratio equals resolution² × window-shrink²", || {
        let mut bad = Vec::new();
        for l in [4usize, 8] {
            for w in (1..=l).filter(|w| l % w == 0) {
                for r in [2usize, 4] {
                    for s in (1..=w).filter(|s| w % s == 0) {
                        let base = enumerated_tokens(l, &[(w, 1)]);
                        let scaled = enumerated_tokens(l * r, &[(w / s, 1)]);
                        if scaled != base * r * r * s * s {
                            bad.push((l, w, r, s));
                        }
                    }
                }
            }
        }
        Ok((bad.is_empty(), format!("mismatches {bad:?}")))
    });
    r.check("migration never invents values", || {
        let mut invented = 0;
        for (k, (src, tgt)) in SCALING_PLANS.iter().enumerate() {
            let sc = small_dims(src.config());
            let plan = plan_scale(&sc, &small_dims(tgt.config()))?;
            let sp = CosParams::random(&sc, &mut rng(seed, 50 + k as u64))?;
            let tp = migrate_params(&sp, &plan)?;
            let pool: HashSet<u64> = sp
                .named()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                .collect();
            invented += tp
                .named()
                .iter()
                .flat_map(|(_, t)| t.data().iter())
                .filter(|v| **v != 0.0 && !pool.contains(&v.to_bits()))
                .count();
        }
        Ok((invented == 0, format!("{invented} invented values")))
    });
}

fn migration(r: &mut Runner, seed: u64) {
    r.check(
        format!("80 -> 336 (res-both) within {PRESERVATION_TOL:e}"),
        || {
            let sc = presets::PRETRAIN_80.config();
            let tc = SCALING_TABLE[7].config();
            let plan = plan_scale(&sc, &tc)?;
            let sp = CosParams::random(&sc, &mut rng(seed, 60))?;
            let tp = migrate_params(&sp, &plan)?;
            let rep = functional_preservation_check(&sp, &tp, &plan, seed)?;
            let all_checked = rep
                .scales
                .iter()
                .all(|s| matches!(s.status, PreservationStatus::Preserved { .. }));
            Ok((
                rep.passed && all_checked,
                format!("{:?}", rep.scales.iter().map(|s| &s.status).collect::<Vec<_>>()),
            ))
        },
    );
}

fn cost(r: &mut Runner) {
    let cp = CostParams::calibrated();
    r.check("step time strictly increasing in visual tokens", || {
        let ok = (0..2000).all(|n| step_time(&cp, n + 1) > step_time(&cp, n));
        Ok((ok, String::new()))
    });
    r.check("calibrated predictions at 80 and 48 tokens within 0.05", || {
        let fit = fit_cost_params(&CALIBRATION_POINTS)?;
        let mut detail = Vec::new();
        let mut ok = true;
        for &(n, observed) in REFERENCE_TIMES.iter().filter(|(n, _)| *n == 80 || *n == 48) {
            let p = fit.predict(n);
            ok &= (p - observed).abs() <= 0.05;
            detail.push(format!("{n}: {p:.3} vs {observed}"));
        }
        Ok((ok, detail.join(", ")))
    });
    r.check(
        "336 -> 32 savings at least 70% and within 3 points of 73%",
        || {
            let e = walltime(&cp, &presets::PRETRAIN_32.config(), &SCALING_TABLE[4].config())?;
            let savings = 100.0 * (1.0 - e.relative);
            Ok((
                savings >= 70.0 && (savings - 73.0).abs() <= 3.0,
                format!("{savings:.2}%"),
            ))
        },
    );
    r.check("walltime linear in samples and inverse in batch", || {
        let c = CosConfig::default_pretrain();
        let mut p = cp;
        p.total_samples = 1200;
        p.batch_size = 10;
        let base = walltime(&p, &c, &c)?.walltime;
        p.total_samples = 3600;
        let tripled = walltime(&p, &c, &c)?.walltime;
        p.total_samples = 1200;
        p.batch_size = 40;
        let quartered = walltime(&p, &c, &c)?.walltime;
        let ok = (tripled - 3.0 * base).abs() <= 1e-9 * base && (quartered - base / 4.0).abs() <= 1e-9 * base;
        Ok((ok, format!("{base:.4} / {tripled:.4} / {quartered:.4}")))
    });
}

fn checkpoint(r: &mut Runner, seed: u64) {
    r.check("save/load is bit-exact", || {
        let cfg = small_dims(SCALING_TABLE[10].config()).with_levels(2);
        let p = CosParams::random(&cfg, &mut rng(seed, 70))?;
        let ck = Checkpoint::from_params(&p);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes)?;
        let same_bits = back.tensors().iter().zip(ck.tensors()).all(|((na, a), (nb, b))| {
            na == nb
                && a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        back.to_params(&cfg)?;
        Ok((
            same_bits && back.to_bytes() == bytes,
            format!("{} tensors, {} bytes", ck.tensors().len(), bytes.len()),
        ))
    });
}

/// The small run used by the training checks and by the pipeline example.
pub fn toy_run(cfg: CosConfig, steps: usize, seed: u64) -> RunConfig {
    let mut rc = RunConfig::new(cfg.with_dims(8, 16, 2).with_out_dim(8));
    rc.steps = steps;
    rc.seed = seed;
    rc.task.data_seed = seed;
    rc.task.target_seed = seed;
    rc
}

fn training(r: &mut Runner, seed: u64) {
    r.check("80-token toy: loss halves within 300 steps", || {
        let (_, rep) = train(&toy_run(presets::PRETRAIN_80.config(), 300, seed), None)?;
        Ok((
            rep.final_loss <= 0.5 * rep.initial_loss,
            format!("{:.4} -> {:.4}", rep.initial_loss, rep.final_loss),
        ))
    });
    r.check("zero learning rate keeps the loss", || {
        let mut rc = toy_run(presets::PRETRAIN_80.config(), 3, seed);
        rc.optimizer.lr = 0.0;
        let (_, rep) = train(&rc, None)?;
        let ok = rep
            .losses
            .iter()
            .chain([&rep.final_loss])
            .all(|l| (l - rep.initial_loss).abs() <= 1e-12);
        Ok((ok, format!("{:?}", rep.losses)))
    });
    r.check("same seed gives identical loss curves", || {
        let rc = toy_run(presets::PRETRAIN_80.config(), 20, seed);
        let a = train(&rc, None)?.1.losses;
        let b = train(&rc, None)?.1.losses;
        let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len();
        Ok((same, String::new()))
    });
    r.check(
        "80 -> 336 pipeline: fine-tuned loss at or below pre-migration loss",
        || {
            let pre = toy_run(presets::PRETRAIN_80.config(), 300, seed);
            let fine = toy_run(SCALING_TABLE[7].config(), 150, seed);
            let plan = plan_scale(&pre.model, &fine.model)?;
            let (_, rep) = pipeline(&pre, &plan, &fine)?;
            Ok((
                rep.finetune.final_loss <= rep.pretrain.final_loss && rep.preservation.passed,
                format!(
                    "pre-train {:.4} -> {:.4}, migrated {:.4}, fine-tuned {:.4}",
                    rep.pretrain.initial_loss,
                    rep.pretrain.final_loss,
                    rep.migrated_loss,
                    rep.finetune.final_loss
                ),
            ))
        },
    );
}
