//! Affine step-time model of pre-training cost.
//!
//! A step costs a fixed overhead plus a per-token term over the visual
//! tokens and the text tokens of each sequence. Wall-clock time is step time
//! times the number of steps needed to see every sample once.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::assembly::{token_count, CosConfig};
use crate::error::{CosError, Result};

/// Mean text length of the pre-training mixture, in tokens.
pub const DEFAULT_TEXT_LEN: f64 = 23.32;

/// Measured pre-training time relative to the 336-token resampler
/// baseline, for 336, 80, 48 and 32 visual tokens.
pub const REFERENCE_TIMES: [(usize, f64); 4] = [(336, 1.00), (80, 0.42), (48, 0.35), (32, 0.27)];

/// The two end points used for calibration.
pub const CALIBRATION_POINTS: [(usize, f64); 2] = [(32, 0.27), (336, 1.00)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Per optimizer step, independent of sequence length.
    pub fixed_step_cost: f64,
    /// Per token of one sequence, at the configured batch size.
    pub per_token_cost: f64,
    pub text_len: f64,
    pub batch_size: u64,
    pub total_samples: u64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CosError::ZeroBatch);
        }
        let ok = self.fixed_step_cost >= 0.0
            && self.per_token_cost > 0.0
            && self.text_len >= 0.0
            && self.fixed_step_cost.is_finite()
            && self.per_token_cost.is_finite()
            && self.text_len.is_finite();
        if !ok {
            return Err(CosError::Degenerate(format!("invalid cost parameters {self:?}")));
        }
        Ok(())
    }

    /// Parameters fitted to [`CALIBRATION_POINTS`]; times are in units of the
    /// 336-token baseline's total pre-training time.
    pub fn calibrated() -> Self {
        fit_cost_params(&CALIBRATION_POINTS)
            .and_then(|f| f.params(DEFAULT_TEXT_LEN))
            .expect("calibration points are well formed")
    }

    pub fn steps(&self) -> Result<u64> {
        if self.batch_size == 0 {
            return Err(CosError::ZeroBatch);
        }
        Ok(self.total_samples.div_ceil(self.batch_size))
    }
}

pub fn step_time(cp: &CostParams, visual_tokens: usize) -> f64 {
    cp.fixed_step_cost + cp.per_token_cost * (visual_tokens as f64 + cp.text_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub visual_tokens: usize,
    pub step_time: f64,
    pub steps: u64,
    pub walltime: f64,
    /// Walltime divided by the reference configuration's walltime.
    pub relative: f64,
}

fn estimate_tokens(cp: &CostParams, visual_tokens: usize) -> Result<(f64, u64, f64)> {
    cp.validate()?;
    let st = step_time(cp, visual_tokens);
    let steps = cp.steps()?;
    Ok((st, steps, st * steps as f64))
}

pub fn walltime(cp: &CostParams, cfg: &CosConfig, reference: &CosConfig) -> Result<CostEstimate> {
    let tokens = token_count(cfg)?;
    let (step_time, steps, wall) = estimate_tokens(cp, tokens)?;
    let (_, _, ref_wall) = estimate_tokens(cp, token_count(reference)?)?;
    Ok(CostEstimate {
        visual_tokens: tokens,
        step_time,
        steps,
        walltime: wall,
        relative: wall / ref_wall,
    })
}

/// Least-squares line through (visual tokens, relative walltime).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostFit {
    pub intercept: f64,
    pub slope: f64,
    /// Observed minus predicted, in input order.
    pub residuals: Vec<f64>,
}

impl CostFit {
    pub fn predict(&self, visual_tokens: usize) -> f64 {
        self.intercept + self.slope * visual_tokens as f64
    }

    /// Expresses the line as cost parameters with one sample of batch one,
    /// so that `walltime == predict`.
    pub fn params(&self, text_len: f64) -> Result<CostParams> {
        let cp = CostParams {
            fixed_step_cost: self.intercept - self.slope * text_len,
            per_token_cost: self.slope,
            text_len,
            batch_size: 1,
            total_samples: 1,
        };
        cp.validate()?;
        Ok(cp)
    }
}

pub fn fit_cost_params(observations: &[(usize, f64)]) -> Result<CostFit> {
    let n = observations.len() as f64;
    if observations.len() < 2 {
        return Err(CosError::Degenerate("need at least two observations".into()));
    }
    if observations.iter().any(|(_, y)| !y.is_finite()) {
        return Err(CosError::Degenerate("non-finite observation".into()));
    }
    let mean_x = observations.iter().map(|&(x, _)| x as f64).sum::<f64>() / n;
    let mean_y = observations.iter().map(|&(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = observations
        .iter()
        .map(|&(x, _)| (x as f64 - mean_x).powi(2))
        .sum();
    if sxx == 0.0 {
        return Err(CosError::Degenerate(
            "all observations share one token count".into(),
        ));
    }
    let sxy: f64 = observations
        .iter()
        .map(|&(x, y)| (x as f64 - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let residuals = observations
        .iter()
        .map(|&(x, y)| y - (intercept + slope * x as f64))
        .collect();
    Ok(CostFit {
        intercept,
        slope,
        residuals,
    })
}

#[derive(Debug, Deserialize)]
struct ObservationRow {
    visual_tokens: usize,
    relative_walltime: f64,
}

/// Reads `visual_tokens,relative_walltime` rows (with that header).
pub fn read_observations<R: Read>(reader: R) -> Result<Vec<(usize, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize::<ObservationRow>()
        .map(|row| Ok(row.map(|r| (r.visual_tokens, r.relative_walltime))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn params(fixed: f64, per_token: f64, text: f64) -> CostParams {
        CostParams {
            fixed_step_cost: fixed,
            per_token_cost: per_token,
            text_len: text,
            batch_size: 1,
            total_samples: 1,
        }
    }

    #[test]
    fn step_time_boundary_and_linearity() {
        let cp = params(2.0, 0.5, 10.0);
        assert_eq!(step_time(&cp, 0), 2.0 + 5.0);
        let lin = params(0.0, 0.5, 0.0);
        assert_eq!(step_time(&lin, 80), 2.0 * step_time(&lin, 40));
    }

    #[test]
    fn two_point_fit_is_exact() {
        let f = fit_cost_params(&CALIBRATION_POINTS).unwrap();
        // line through (32, 0.27) and (336, 1.00)
        let slope = 0.73 / 304.0;
        assert!((f.slope - slope).abs() < 1e-15);
        assert!((f.intercept - (0.27 - 32.0 * slope)).abs() < 1e-15);
        assert!(f.residuals.iter().all(|r| r.abs() < 1e-15));
        assert!((f.predict(80) - 0.42).abs() <= 0.05);
        assert!((f.predict(48) - 0.35).abs() <= 0.05);
        let cp = f.params(DEFAULT_TEXT_LEN).unwrap();
        let ratio = step_time(&cp, 80) / step_time(&cp, 336);
        assert!((ratio - f.predict(80)).abs() < 1e-12);
        assert!((ratio - 0.385).abs() < 1e-3);
    }

    #[test]
    fn constant_observations_give_zero_slope() {
        let f = fit_cost_params(&[(10, 0.5), (20, 0.5)]).unwrap();
        assert_eq!(f.slope, 0.0);
        assert_eq!(f.intercept, 0.5);
        assert!(f.params(0.0).is_err());
    }

    #[test]
    fn degenerate_fits() {
        assert!(matches!(
            fit_cost_params(&[(10, 0.5)]),
            Err(CosError::Degenerate(_))
        ));
        assert!(matches!(
            fit_cost_params(&[(10, 0.5), (10, 0.7)]),
            Err(CosError::Degenerate(_))
        ));
    }

    #[test]
    fn relative_to_self_is_one() {
        let cp = CostParams::calibrated();
        let c = CosConfig::default_pretrain();
        assert_eq!(walltime(&cp, &c, &c).unwrap().relative, 1.0);
    }

    #[test]
    fn calibrated_savings() {
        let cp = CostParams::calibrated();
        let reference = presets::SCALING_TABLE[4].config(); // 336 tokens
        let e = walltime(&cp, &presets::PRETRAIN_32.config(), &reference).unwrap();
        assert_eq!(e.visual_tokens, 32);
        assert!((e.relative - 0.27).abs() < 1e-12);
    }

    #[test]
    fn monotone_over_scaling_table() {
        let cp = CostParams::calibrated();
        let reference = presets::SCALING_TABLE[0].config();
        let mut rows: Vec<(usize, f64)> = presets::SCALING_TABLE
            .iter()
            .map(|p| {
                let e = walltime(&cp, &p.config(), &reference).unwrap();
                (e.visual_tokens, e.relative)
            })
            .collect();
        rows.sort_by_key(|r| r.0);
        for w in rows.windows(2) {
            if w[1].0 > w[0].0 {
                assert!(w[1].1 > w[0].1);
            } else {
                assert_eq!(w[1].1, w[0].1);
            }
        }
    }

    #[test]
    fn walltime_scaling_with_samples_and_batch() {
        let mut cp = params(1.0, 0.01, DEFAULT_TEXT_LEN);
        let c = CosConfig::default_pretrain();
        cp.total_samples = 1000;
        cp.batch_size = 10;
        let base = walltime(&cp, &c, &c).unwrap().walltime;
        cp.total_samples = 3000;
        assert!((walltime(&cp, &c, &c).unwrap().walltime - 3.0 * base).abs() < 1e-9);
        cp.total_samples = 1000;
        cp.batch_size = 20;
        assert!((walltime(&cp, &c, &c).unwrap().walltime - base / 2.0).abs() < 1e-9);
        cp.batch_size = 0;
        assert!(matches!(walltime(&cp, &c, &c), Err(CosError::ZeroBatch)));
    }

    #[test]
    fn reads_csv() {
        let text = "visual_tokens,relative_walltime\n32, 0.27\n336,1.0\n";
        assert_eq!(
            read_observations(text.as_bytes()).unwrap(),
            vec![(32, 0.27), (336, 1.0)]
        );
        assert!(read_observations("visual_tokens,relative_walltime\nx,1\n".as_bytes()).is_err());
    }
}
