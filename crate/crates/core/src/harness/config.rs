//! JSON config documents. Every document carries `"schema": 1` and unknown
//! keys are rejected.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assembly::CosConfig;
use crate::error::{CosError, Result};

pub const SCHEMA_VERSION: u64 = 1;

fn strip_schema(text: &str) -> Result<Value> {
    let mut value: Value = serde_json::from_str(text)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CosError::Document("top level must be an object".into()))?;
    match obj.remove("schema") {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => Ok(value),
        Some(other) => Err(CosError::Document(format!(
            "unsupported schema {other}, expected {SCHEMA_VERSION}"
        ))),
        None => Err(CosError::Document("missing \"schema\" key".into())),
    }
}

fn parse_document<T: DeserializeOwned>(text: &str) -> Result<T> {
    Ok(serde_json::from_value(strip_schema(text)?)?)
}

fn with_schema<T: Serialize>(doc: &T) -> Result<String> {
    let mut value = serde_json::to_value(doc)?;
    if let Value::Object(obj) = &mut value {
        obj.insert("schema".into(), Value::from(SCHEMA_VERSION));
    }
    Ok(serde_json::to_string_pretty(&value)?)
}

pub fn parse_config(text: &str) -> Result<CosConfig> {
    parse_document(text)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<CosConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn config_to_json(cfg: &CosConfig) -> Result<String> {
    with_schema(cfg)
}

fn d_lr() -> f64 {
    3e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.98
}
fn d_eps() -> f64 {
    1e-8
}
fn d_weight_decay() -> f64 {
    0.1
}
fn d_min_lr_ratio() -> f64 {
    0.005
}

/// AdamW with warmup and cosine decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    /// Defaults to 1/60 of the run, rounded up.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    /// Floor of the cosine schedule as a fraction of `lr`.
    #[serde(default = "d_min_lr_ratio")]
    pub min_lr_ratio: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_weight_decay(),
            warmup_steps: None,
            min_lr_ratio: d_min_lr_ratio(),
        }
    }
}

impl OptimizerConfig {
    pub fn warmup(&self, total_steps: usize) -> usize {
        self.warmup_steps.unwrap_or(total_steps.div_ceil(60))
    }

    /// Learning rate for 0-based `step` of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = self.warmup(total_steps);
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = total_steps.saturating_sub(warmup).max(1);
        let progress = ((step - warmup) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

fn d_noise() -> f64 {
    0.5
}
fn d_grid() -> usize {
    4
}

/// Synthetic regression task: Gaussian feature maps with a planted
/// block-constant signal; each target token is a fixed random linear map of
/// its window's mean feature plus a per-query offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub target_seed: u64,
    /// Std of the per-cell noise added on top of the block signal.
    #[serde(default = "d_noise")]
    pub noise_std: f64,
    /// Blocks per side of the planted signal; must divide the feature size.
    #[serde(default = "d_grid")]
    pub signal_grid: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            data_seed: 0,
            target_seed: 0,
            noise_std: d_noise(),
            signal_grid: d_grid(),
        }
    }
}

fn d_steps() -> usize {
    300
}
fn d_batch() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: CosConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    /// Number of synthetic samples; every step uses all of them.
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub task: TaskConfig,
}

impl RunConfig {
    pub fn new(model: CosConfig) -> Self {
        Self {
            model,
            seed: 0,
            steps: d_steps(),
            batch: d_batch(),
            optimizer: OptimizerConfig::default(),
            task: TaskConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(CosError::ZeroBatch);
        }
        if self.task.signal_grid == 0 {
            return Err(CosError::Document("task.signal_grid must be positive".into()));
        }
        Ok(())
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    parse_document(text)
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    parse_run_config(&fs::read_to_string(path)?)
}

pub fn run_config_to_json(rc: &RunConfig) -> Result<String> {
    with_schema(rc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = parse_config(
            r#"{"schema": 1, "resolution": 224,
                "scales": [{"window_size": 16, "queries_per_window": 16},
                           {"window_size": 4, "queries_per_window": 4}]}"#,
        )
        .unwrap();
        assert_eq!(c, CosConfig::default_pretrain());
        assert_eq!(parse_config(&config_to_json(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_schema() {
        let body = r#""resolution": 224, "scales": []"#;
        assert!(parse_config(&format!("{{{body}}}")).is_err());
        assert!(parse_config(&format!("{{\"schema\": 2, {body}}}")).is_err());
        assert!(parse_config(&format!("{{\"schema\": 1, \"extra\": 0, {body}}}")).is_err());
        assert!(parse_config("[1]").is_err());
        assert!(parse_config(
            r#"{"schema": 1, "resolution": 224, "scales": [{"window_size": 4, "queries_per_window": 4, "x": 1}]}"#
        )
        .is_err());
    }

    #[test]
    fn run_config_defaults_follow_reference_optimizer() {
        let rc = parse_run_config(
            r#"{"schema": 1, "model": {"resolution": 224, "scales": [{"window_size": 16, "queries_per_window": 16}]}}"#,
        )
        .unwrap();
        assert_eq!(rc.optimizer.beta1, 0.9);
        assert_eq!(rc.optimizer.beta2, 0.98);
        assert_eq!(rc.optimizer.weight_decay, 0.1);
        assert_eq!(parse_run_config(&run_config_to_json(&rc).unwrap()).unwrap(), rc);
        assert!(
            parse_run_config(r#"{"schema": 1, "model": {"resolution": 224, "scales": []}, "lr": 1}"#)
                .is_err()
        );
    }

    #[test]
    fn schedule_shape() {
        let o = OptimizerConfig::default();
        assert_eq!(o.warmup(120), 2);
        assert!((o.lr_at(0, 120) - o.lr / 2.0).abs() < 1e-15);
        assert!((o.lr_at(1, 120) - o.lr).abs() < 1e-15);
        assert!((o.lr_at(120, 120) - o.lr * o.min_lr_ratio).abs() < 1e-15);
        let mid = o.lr_at(61, 120);
        assert!(mid < o.lr && mid > o.lr * o.min_lr_ratio);
    }
}
