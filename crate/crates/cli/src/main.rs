use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use cos_core::assembly::{forward, token_count, CosConfig, CosParams};
use cos_core::cost_model::{fit_cost_params, read_observations, walltime, CostParams, DEFAULT_TEXT_LEN};
use cos_core::harness::checkpoint::Checkpoint;
use cos_core::harness::config::{load_config, load_run_config};
use cos_core::harness::props::{forward_grad_check, run_properties};
use cos_core::harness::synthetic::gaussian_input;
use cos_core::harness::train::{pipeline, train};
use cos_core::presets;
use cos_core::scaling::{functional_preservation_check, migrate_params, plan_scale};
use cos_core::{CosError, Violation};

#[derive(Parser)]
#[command(
    name = "cos",
    version,
    about = "Multi-scale windowed visual resampler toolkit"
)]
struct Cli {
    /// Seed for every random draw; overrides the seed in run configs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Visual token count of each config.
    Tokens {
        configs: Vec<PathBuf>,
        /// Built-in configuration by name; repeatable.
        #[arg(long = "preset")]
        presets: Vec<String>,
    },
    /// Check a config and list every violation.
    Validate { config: PathBuf },
    /// Write randomly initialized parameters for a config.
    Init {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the bridge on synthetic Gaussian features.
    Forward {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long)]
        synthetic_seed: Option<u64>,
        /// Also write the token matrix and provenance as JSON.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Migrate a checkpoint to a config with more tokens.
    Scale {
        source_checkpoint: PathBuf,
        source_config: PathBuf,
        target_config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train on the synthetic task.
    Train {
        run: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train small, migrate, and keep training at the target config.
    Pipeline {
        small: PathBuf,
        target: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients with central differences.
    Gradcheck {
        config: PathBuf,
        /// Check a random subset of this many parameter entries.
        #[arg(long)]
        max_entries: Option<usize>,
    },
    /// Relative pre-training walltime of each config against the first.
    Cost {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Fit the cost line to `visual_tokens,relative_walltime` rows.
        #[arg(long)]
        fit: Option<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TEXT_LEN)]
        text_len: f64,
    },
    /// Run property suites.
    Props { suite: Option<String> },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// A closed stdout (e.g. piped into `head`) is not an error.
fn emit(cli: &Cli, value: Value, text: impl FnOnce() -> String) {
    let body = if cli.json {
        serde_json::to_string_pretty(&value).expect("json values serialize") + "\n"
    } else {
        text()
    };
    let _ = std::io::stdout().lock().write_all(body.as_bytes());
}

fn config(path: &Path) -> Result<CosConfig> {
    load_config(path).with_context(|| format!("reading {}", path.display()))
}

fn params(ckpt: &Path, cfg: &CosConfig) -> Result<CosParams> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    Ok(ck.to_params(cfg)?)
}

fn violation_json(v: &Violation) -> Value {
    json!({"field": v.field, "kind": format!("{:?}", v.kind), "message": v.message})
}

fn run(cli: &Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Tokens {
            configs,
            presets: names,
        } => {
            if configs.is_empty() && names.is_empty() {
                bail!("give at least one config file or --preset");
            }
            let mut rows = Vec::new();
            for name in names {
                let p = presets::find(name).with_context(|| format!("unknown preset {name:?}"))?;
                rows.push((name.clone(), p.config()));
            }
            for path in configs {
                rows.push((path.display().to_string(), config(path)?));
            }
            let mut out = Vec::new();
            for (label, cfg) in &rows {
                let l = cfg.feature_size();
                let per_scale: Vec<usize> = cfg.scales.iter().map(|s| s.tokens(l)).collect();
                out.push((label, token_count(cfg)?, per_scale));
            }
            emit(
                cli,
                json!(out
                    .iter()
                    .map(|(l, n, s)| json!({"config": l, "tokens": n, "per_scale": s}))
                    .collect::<Vec<_>>()),
                || out.iter().map(|(l, n, s)| format!("{l}\t{n}\t{s:?}\n")).collect(),
            );
            Ok(true)
        }
        Command::Validate { config: path } => {
            let cfg = config(path)?;
            let violations = cos_core::assembly::validate_config(&cfg);
            emit(
                cli,
                json!({"valid": violations.is_empty(), "violations": violations.iter().map(violation_json).collect::<Vec<_>>()}),
                || {
                    if violations.is_empty() {
                        "valid\n".into()
                    } else {
                        violations
                            .iter()
                            .map(|v| format!("{}: {:?}: {}\n", v.field, v.kind, v.message))
                            .collect()
                    }
                },
            );
            Ok(violations.is_empty())
        }
        Command::Init { config: path, output } => {
            use rand::SeedableRng;
            let cfg = config(path)?;
            let p = CosParams::random(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))?;
            Checkpoint::from_params(&p).save(output)?;
            emit(cli, json!({"parameters": p.num_parameters()}), || {
                format!("{} parameters -> {}\n", p.num_parameters(), output.display())
            });
            Ok(true)
        }
        Command::Forward {
            config: path,
            checkpoint,
            synthetic_seed,
            output,
        } => {
            let cfg = config(path)?;
            let p = params(checkpoint, &cfg)?;
            let input = gaussian_input(&cfg, synthetic_seed.unwrap_or(seed))?;
            let seq = forward(&cfg, &p, &input)?;
            let doc = json!({
                "tokens": seq.len(),
                "dim": seq.tokens.cols(),
                "values": (0..seq.len()).map(|i| seq.tokens.row(i).to_vec()).collect::<Vec<_>>(),
                "provenance": seq.provenance.iter().map(|p| json!([p.scale, p.window, p.query, p.window_size])).collect::<Vec<_>>(),
            });
            if let Some(out) = output {
                fs::write(out, serde_json::to_string(&doc)?)?;
            }
            let mean_abs = seq.tokens.data().iter().map(|v| v.abs()).sum::<f64>() / seq.tokens.numel() as f64;
            emit(
                cli,
                json!({"tokens": seq.len(), "dim": seq.tokens.cols(), "mean_abs": mean_abs}),
                || {
                    format!(
                        "{} tokens × {}  mean |x| {mean_abs:.6}\n",
                        seq.len(),
                        seq.tokens.cols()
                    )
                },
            );
            Ok(true)
        }
        Command::Scale {
            source_checkpoint,
            source_config,
            target_config,
            output,
        } => {
            let sc = config(source_config)?;
            let tc = config(target_config)?;
            let plan = plan_scale(&sc, &tc)?;
            let sp = params(source_checkpoint, &sc)?;
            let tp = migrate_params(&sp, &plan)?;
            let report = functional_preservation_check(&sp, &tp, &plan, seed)?;
            Checkpoint::from_params(&tp).save(output)?;
            emit(
                cli,
                json!({
                    "source_tokens": plan.source_tokens,
                    "target_tokens": plan.target_tokens,
                    "token_ratio": plan.token_ratio,
                    "scale_map": plan.scale_map,
                    "preservation": report,
                }),
                || {
                    let mut s = format!(
                        "{} -> {} tokens (×{:.4})\n",
                        plan.source_tokens, plan.target_tokens, plan.token_ratio
                    );
                    for e in &report.scales {
                        s += &format!("  scale {}: {:?} {:?}\n", e.target_scale, e.mapping, e.status);
                    }
                    s
                },
            );
            Ok(report.passed)
        }
        Command::Train { run: path, output } => {
            let mut rc = load_run_config(path).with_context(|| format!("reading {}", path.display()))?;
            if let Some(s) = cli.seed {
                rc.seed = s;
            }
            let (p, report) = train(&rc, None)?;
            Checkpoint::from_params(&p).save(output)?;
            emit(cli, serde_json::to_value(&report)?, || {
                format!(
                    "{} tokens, {} steps: loss {:.6} -> {:.6}\n",
                    report.visual_tokens, report.steps, report.initial_loss, report.final_loss
                )
            });
            Ok(true)
        }
        Command::Pipeline {
            small,
            target,
            output,
        } => {
            let mut pre = load_run_config(small).with_context(|| format!("reading {}", small.display()))?;
            let mut fine =
                load_run_config(target).with_context(|| format!("reading {}", target.display()))?;
            if let Some(s) = cli.seed {
                pre.seed = s;
                fine.seed = s;
            }
            let plan = plan_scale(&pre.model, &fine.model)?;
            let (p, report) = pipeline(&pre, &plan, &fine)?;
            if let Some(out) = output {
                Checkpoint::from_params(&p).save(out)?;
            }
            emit(cli, serde_json::to_value(&report)?, || {
                format!(
                    "token ratio {:.4}\npre-train  {} tokens: {:.6} -> {:.6}\nmigrated   {} tokens: {:.6}\nfine-tune  {} tokens: {:.6} -> {:.6}\npreservation {}\n",
                    report.token_ratio,
                    report.pretrain.visual_tokens,
                    report.pretrain.initial_loss,
                    report.pretrain.final_loss,
                    report.finetune.visual_tokens,
                    report.migrated_loss,
                    report.finetune.visual_tokens,
                    report.finetune.initial_loss,
                    report.finetune.final_loss,
                    if report.preservation.passed { "passed" } else { "FAILED" },
                )
            });
            Ok(report.preservation.passed)
        }
        Command::Gradcheck {
            config: path,
            max_entries,
        } => {
            let cfg = config(path)?;
            let r = forward_grad_check(&cfg, seed, *max_entries)?;
            emit(
                cli,
                json!({"passed": r.passed, "checked": r.checked, "max_rel_error": r.max_rel_error, "max_abs_error": r.max_abs_error, "tol": r.tol}),
                || {
                    format!(
                        "{} entries, max relative error {:.3e} (tol {:e}): {}\n",
                        r.checked,
                        r.max_rel_error,
                        r.tol,
                        if r.passed { "passed" } else { "FAILED" }
                    )
                },
            );
            Ok(r.passed)
        }
        Command::Cost {
            configs,
            fit,
            csv: csv_out,
            text_len,
        } => {
            let cp = match fit {
                Some(path) => {
                    let obs = read_observations(
                        fs::File::open(path).with_context(|| format!("reading {}", path.display()))?,
                    )?;
                    fit_cost_params(&obs)?.params(*text_len)?
                }
                None => CostParams {
                    text_len: *text_len,
                    ..CostParams::calibrated()
                },
            };
            let cfgs = configs.iter().map(|p| config(p)).collect::<Result<Vec<_>>>()?;
            let rows = cfgs
                .iter()
                .map(|c| walltime(&cp, c, &cfgs[0]))
                .collect::<Result<Vec<_>, CosError>>()?;
            let mut table = String::from("config,visual_tokens,step_time,steps,walltime,relative\n");
            for (path, e) in configs.iter().zip(&rows) {
                table += &format!(
                    "{},{},{},{},{},{}\n",
                    path.display(),
                    e.visual_tokens,
                    e.step_time,
                    e.steps,
                    e.walltime,
                    e.relative
                );
            }
            if let Some(out) = csv_out {
                fs::write(out, &table)?;
            }
            emit(cli, json!({"params": cp, "rows": rows}), || {
                let mut s = format!(
                    "{:<32} {:>7} {:>10} {:>9}\n",
                    "config", "tokens", "step", "relative"
                );
                for (path, e) in configs.iter().zip(&rows) {
                    s += &format!(
                        "{:<32} {:>7} {:>10.5} {:>8.3}x\n",
                        path.display(),
                        e.visual_tokens,
                        e.step_time,
                        e.relative
                    );
                }
                s
            });
            Ok(true)
        }
        Command::Props { suite } => {
            let report = run_properties(suite.as_deref(), seed);
            emit(cli, serde_json::to_value(&report)?, || {
                let mut s = String::new();
                for r in &report.results {
                    s += &format!(
                        "{} [{}] {} ({:.2}s) {}\n",
                        if r.passed { "PASS" } else { "FAIL" },
                        r.suite,
                        r.name,
                        r.seconds,
                        r.detail
                    );
                }
                let failed = report.failures().count();
                s += &format!(
                    "{} checks, {failed} failed, {:.1}s\n",
                    report.results.len(),
                    report.seconds
                );
                s
            });
            Ok(report.passed)
        }
    }
}
