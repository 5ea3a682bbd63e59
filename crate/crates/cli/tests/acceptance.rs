//! Acceptance criteria, one test each. Run with `--nocapture` to see the
//! PASS/FAIL line of every criterion.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use cos_core::assembly::{forward, forward_on_tape, provenance, token_count, CosConfig, CosParams};
use cos_core::cost_model::{fit_cost_params, walltime, CostParams};
use cos_core::harness::checkpoint::Checkpoint;
use cos_core::harness::config::{config_to_json, RunConfig};
use cos_core::harness::train::{pipeline, train};
use cos_core::numerics::{grad_check, Tensor};
use cos_core::presets::{PRETRAIN_32, PRETRAIN_48, PRETRAIN_80, SCALING_PLANS, SCALING_TABLE};
use cos_core::resampler::{resample_window, LevelStack};
use cos_core::scaling::{functional_preservation_check, migrate_params, plan_scale, ScaleMapping};
use cos_core::windowing::{partition, unpartition, FeatureMap};

fn verdict(id: u32, title: &str, passed: bool, detail: impl AsRef<str>) {
    println!(
        "criterion {id:>2} {} {title}: {}",
        if passed { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    assert!(passed, "criterion {id} failed: {}", detail.as_ref());
}

fn cos() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cos"))
}

fn write_config(dir: &Path, name: &str, cfg: &CosConfig) -> std::path::PathBuf {
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, config_to_json(cfg).unwrap()).unwrap();
    path
}

fn gaussian_stack(cfg: &CosConfig, rng: &mut ChaCha8Rng) -> LevelStack {
    let l = cfg.feature_size();
    LevelStack::new(
        (0..cfg.levels)
            .map(|_| FeatureMap::new(Tensor::randn([l, l, cfg.channels], 1.0, rng)).unwrap())
            .collect(),
    )
    .unwrap()
}

/// Token total by visiting every cell and counting the distinct windows.
fn enumerated_tokens(l: usize, scales: &[(usize, usize)]) -> usize {
    scales
        .iter()
        .map(|&(w, n)| {
            let mut seen = HashSet::new();
            for i in 0..l {
                for j in 0..l {
                    seen.insert((i / w, j / w));
                }
            }
            seen.len() * n
        })
        .sum()
}

#[test]
fn criterion_01_token_totals() {
    let expected = [80, 144, 272, 336, 144, 272, 336, 528, 1104, 1296];
    let rows: Vec<_> = SCALING_TABLE
        .iter()
        .filter(|p| p.name != "baseline-448")
        .collect();
    assert_eq!(rows.len(), expected.len());
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = rows
        .iter()
        .map(|p| write_config(dir.path(), p.name, &p.config()))
        .collect();
    let start = Instant::now();
    let out = cos().arg("--json").arg("tokens").args(&paths).output().unwrap();
    let elapsed = start.elapsed();
    assert!(out.status.success());
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let got: Vec<u64> = doc
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["tokens"].as_u64().unwrap())
        .collect();
    let want: Vec<u64> = expected.iter().map(|&n| n as u64).collect();
    verdict(
        1,
        "token totals",
        got == want && elapsed < Duration::from_secs(1),
        format!("{got:?} in {elapsed:?}"),
    );
}

#[test]
fn criterion_02_scaling_targets() {
    let exact = [16.5, 49.0 / 3.0, 16.2];
    let mut ok = true;
    let mut detail = Vec::new();
    for ((src, tgt), want) in SCALING_PLANS.iter().zip(exact) {
        let plan = plan_scale(&src.config(), &tgt.config()).unwrap();
        plan.source.validate().unwrap();
        plan.target.validate().unwrap();
        let oracle = enumerated_tokens(32, tgt.scales) as f64 / enumerated_tokens(16, src.scales) as f64;
        ok &= (plan.token_ratio - want).abs() < 1e-12 && (oracle - want).abs() < 1e-12;
        detail.push(format!(
            "{}->{} ×{:.4}",
            plan.source_tokens, plan.target_tokens, plan.token_ratio
        ));
    }
    assert_eq!(
        [PRETRAIN_32.tokens, PRETRAIN_48.tokens, PRETRAIN_80.tokens],
        [32, 48, 80]
    );
    let big = plan_scale(&PRETRAIN_80.config(), &SCALING_PLANS[2].1.config()).unwrap();
    ok &= big.token_ratio >= 16.0;
    verdict(2, "scaling targets", ok, detail.join(", "));
}

#[test]
fn criterion_03_partition_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for _ in 0..200 {
        let l = rng.random_range(1..=32usize);
        let divisors: Vec<usize> = (1..=l).filter(|w| l % w == 0).collect();
        let w = *divisors.choose(&mut rng).unwrap();
        let c = rng.random_range(1..=5usize);
        let x = FeatureMap::new(Tensor::randn([l, l, c], 1.0, &mut rng)).unwrap();
        let back = unpartition(&partition(&x, w).unwrap()).unwrap();
        let same = back.tensor().shape() == x.tensor().shape()
            && back
                .tensor()
                .data()
                .iter()
                .zip(x.tensor().data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        failures += usize::from(!same);
    }
    verdict(
        3,
        "partition round-trip",
        failures == 0,
        format!("{failures}/200 mismatches"),
    );
}

#[test]
fn criterion_04_locality() {
    let cfg = PRETRAIN_80.config();
    let l = cfg.feature_size();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = CosParams::random(&cfg, &mut rng).unwrap();
    let prov = provenance(&cfg);
    let mut changed = 0usize;
    let mut compared = 0usize;
    for _ in 0..50 {
        let input = gaussian_stack(&cfg, &mut rng);
        let base = forward(&cfg, &params, &input).unwrap();
        for (s, spec) in cfg.scales.iter().enumerate() {
            let w = spec.window_size;
            let per_side = l / w;
            let win = rng.random_range(0..per_side * per_side);
            let (wr, wc) = (win / per_side, win % per_side);
            let levels: Vec<FeatureMap> = input
                .levels()
                .iter()
                .map(|m| {
                    let mut m = m.clone();
                    for i in 0..l {
                        for j in 0..l {
                            if i / w != wr || j / w != wc {
                                for v in m.cell_mut(i, j) {
                                    *v = rng.random_range(-4.0..4.0);
                                }
                            }
                        }
                    }
                    m
                })
                .collect();
            let out = forward(&cfg, &params, &LevelStack::new(levels).unwrap()).unwrap();
            for (row, p) in prov.iter().enumerate() {
                if p.scale == s && p.window == win {
                    compared += 1;
                    let a = base.tokens.row(row);
                    let b = out.tokens.row(row);
                    if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                        changed += 1;
                    }
                }
            }
        }
    }
    verdict(
        4,
        "window locality",
        changed == 0 && compared == 50 * (16 + 4),
        format!("{changed} of {compared} window tokens changed over 50 trials"),
    );
}

#[test]
fn criterion_05_gradient_check() {
    let cfg = CosConfig::new(56, &[(4, 2), (2, 1)])
        .with_dims(3, 4, 2)
        .with_levels(2)
        .with_out_dim(3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = CosParams::random(&cfg, &mut rng).unwrap();
    let input = gaussian_stack(&cfg, &mut rng);
    let flat: Vec<Tensor> = input.levels().iter().map(|m| m.flattened()).collect();
    let target = Tensor::randn([token_count(&cfg).unwrap(), cfg.out_dim()], 1.0, &mut rng);
    let start = Instant::now();
    let report = grad_check(
        |tape, vars| {
            let bound = params.bind_vars(vars)?;
            let levels = flat
                .iter()
                .map(|f| tape.leaf(f.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            let out = forward_on_tape(tape, &cfg, &bound, &levels)?;
            let t = tape.leaf(target.clone())?;
            let d = tape.sub(out, t)?;
            let sq = tape.mul(d, d)?;
            tape.mean(sq)
        },
        &params.flat_tensors(),
        1e-5,
        1e-3,
    )
    .unwrap();
    let elapsed = start.elapsed();
    verdict(
        5,
        "gradient check",
        report.passed
            && report.max_rel_error < 1e-3
            && report.checked == params.num_parameters()
            && elapsed < Duration::from_secs(60),
        format!(
            "{} entries, max relative error {:.3e}, {elapsed:?}",
            report.checked, report.max_rel_error
        ),
    );
}

#[test]
fn criterion_06_migration_preservation() {
    let src_cfg = PRETRAIN_80.config();
    let tgt_cfg = SCALING_TABLE[7].config();
    assert_eq!(token_count(&tgt_cfg).unwrap(), 336);
    let plan = plan_scale(&src_cfg, &tgt_cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let src = CosParams::random(&src_cfg, &mut rng).unwrap();
    let tgt = migrate_params(&src, &plan).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (t, m) in plan.scale_map.iter().enumerate() {
        let s = match m {
            ScaleMapping::Inherit(s) | ScaleMapping::New(s) => *s,
        };
        if src_cfg.scales[s].queries_per_window != tgt_cfg.scales[t].queries_per_window {
            continue;
        }
        let w = tgt_cfg.scales[t].window_size;
        for _ in 0..5 {
            let win = vec![Tensor::randn([w * w, tgt_cfg.channels], 1.0, &mut rng)];
            let a = resample_window(&src.scales[s], &win).unwrap();
            let b = resample_window(&tgt.scales[t], &win).unwrap();
            worst = worst.max(a.max_abs_diff(&b));
        }
        checked += 1;
    }
    let report = functional_preservation_check(&src, &tgt, &plan, 6).unwrap();
    verdict(
        6,
        "migration preservation",
        checked == 3 && worst <= 1e-6 && report.passed,
        format!("{checked} scales, max deviation {worst:.3e}"),
    );
}

fn toy(cfg: CosConfig, steps: usize) -> RunConfig {
    let mut rc = RunConfig::new(cfg.with_dims(8, 16, 2).with_out_dim(8));
    rc.steps = steps;
    rc.seed = 7;
    rc.task.data_seed = 7;
    rc.task.target_seed = 7;
    rc
}

#[test]
fn criterion_07_desk_training() {
    let pre = toy(PRETRAIN_80.config(), 300);
    let fine = toy(SCALING_TABLE[7].config(), 150);
    let plan = plan_scale(&pre.model, &fine.model).unwrap();
    let (_, rep) = pipeline(&pre, &plan, &fine).unwrap();
    let halved_at = rep
        .pretrain
        .losses
        .iter()
        .chain([&rep.pretrain.final_loss])
        .position(|&l| l <= 0.5 * rep.pretrain.initial_loss);
    let again = train(&pre, None).unwrap().1;
    let deterministic = again.losses.len() == rep.pretrain.losses.len()
        && again
            .losses
            .iter()
            .zip(&rep.pretrain.losses)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(
        7,
        "desk-scale training",
        halved_at.is_some_and(|s| s <= 500)
            && rep.finetune.visual_tokens == 336
            && rep.finetune.final_loss <= rep.pretrain.final_loss
            && deterministic,
        format!(
            "80 tokens {:.4} -> {:.4} (halved by step {halved_at:?}), 336 tokens {:.4} -> {:.4}, deterministic {deterministic}",
            rep.pretrain.initial_loss, rep.pretrain.final_loss, rep.migrated_loss, rep.finetune.final_loss
        ),
    );
}

#[test]
fn criterion_08_cost_calibration() {
    let fit = fit_cost_params(&[(32, 0.27), (336, 1.00)]).unwrap();
    let at80 = fit.predict(80);
    let at48 = fit.predict(48);
    let cp: CostParams = fit.params(23.32).unwrap();
    let e = walltime(&cp, &PRETRAIN_32.config(), &SCALING_TABLE[4].config()).unwrap();
    let savings = 1.0 - e.relative;

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("obs.csv");
    std::fs::write(&csv, "visual_tokens,relative_walltime\n32,0.27\n336,1.00\n").unwrap();
    let base = write_config(dir.path(), "base", &SCALING_TABLE[4].config());
    let small = write_config(dir.path(), "small", &PRETRAIN_32.config());
    let out = cos()
        .arg("--json")
        .arg("cost")
        .arg(&base)
        .arg(&small)
        .arg("--fit")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success());
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let cli_relative = doc["rows"][1]["relative"].as_f64().unwrap();

    verdict(
        8,
        "cost calibration",
        (at80 - 0.42).abs() <= 0.05
            && (at48 - 0.35).abs() <= 0.05
            && savings >= 0.70
            && (savings - 0.73).abs() <= 0.03
            && (cli_relative - e.relative).abs() < 1e-12,
        format!(
            "80 -> {at80:.3}, 48 -> {at48:.3}, savings {:.1}%",
            100.0 * savings
        ),
    );
}

#[test]
fn criterion_09_coarse_to_fine_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = 0;
    for _ in 0..100 {
        let l = [4usize, 6, 8, 12, 16][rng.random_range(0..5)];
        let mut windows: Vec<usize> = (1..=l).filter(|w| l.is_multiple_of(*w)).collect();
        windows.shuffle(&mut rng);
        windows.truncate(rng.random_range(1..=3));
        windows.sort_unstable_by(|a, b| b.cmp(a));
        let scales: Vec<(usize, usize)> = windows.iter().map(|&w| (w, rng.random_range(1..=4))).collect();
        let cfg = CosConfig::new(14 * l, &scales)
            .with_dims(2, 4, 2)
            .with_levels(rng.random_range(1..=2));
        let params = CosParams::random(&cfg, &mut rng).unwrap();
        let out = forward(&cfg, &params, &gaussian_stack(&cfg, &mut rng)).unwrap();
        let sizes: Vec<usize> = out.provenance.iter().map(|p| p.window_size).collect();
        if sizes.windows(2).any(|w| w[1] > w[0]) || out.len() != token_count(&cfg).unwrap() {
            bad += 1;
        }
    }
    verdict(
        9,
        "coarse-to-fine order",
        bad == 0,
        format!("{bad}/100 configs out of order"),
    );
}

#[test]
fn criterion_10_checkpoint_and_props() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SCALING_TABLE[10].config().with_dims(4, 8, 2).with_levels(2);
    let params = CosParams::random(&cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let ck = Checkpoint::from_params(&params);
    let path = dir.path().join("p.ckpt");
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let bit_exact = back.tensors().len() == ck.tensors().len()
        && back.tensors().iter().zip(ck.tensors()).all(|((na, a), (nb, b))| {
            na == nb
                && a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && back.to_bytes() == bytes;
    back.to_params(&cfg).unwrap();

    let start = Instant::now();
    let out = cos().arg("props").output().unwrap();
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let summary = text.lines().last().unwrap_or_default().to_string();
    verdict(
        10,
        "checkpoint round-trip and property suite",
        bit_exact && out.status.success() && elapsed < Duration::from_secs(300),
        format!("bit-exact {bit_exact}; props: {summary} (wall {elapsed:?})"),
    );
}
