//! Full-batch AdamW training on the synthetic task, and the
//! pretrain → migrate → fine-tune pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assembly::{forward_on_tape, token_count, CosParams};
use crate::error::{CosError, Result};
use crate::harness::config::{OptimizerConfig, RunConfig};
use crate::harness::synthetic::{dataset, Sample};
use crate::numerics::{Tape, Tensor};
use crate::scaling::{functional_preservation_check, migrate_params, PreservationReport, ScalePlan};

/// Weight decay applies to projection matrices only.
pub fn decays(name: &str) -> bool {
    name.ends_with("_proj") || name.ends_with("mlp_in") || name.ends_with("mlp_out")
}

pub struct AdamW {
    cfg: OptimizerConfig,
    total_steps: usize,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &CosParams, total_steps: usize) -> Self {
        let zeros: Vec<Vec<f64>> = params.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            total_steps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `grads` follow [`CosParams::named`] order; shapes may differ as long
    /// as element counts agree.
    pub fn step(&mut self, params: &mut CosParams, grads: &[Tensor]) -> Result<()> {
        let lr = self.cfg.lr_at(self.step, self.total_steps);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (k, (name, p)) in params.named_mut().into_iter().enumerate() {
            let g = grads[k].data();
            if g.len() != p.numel() {
                return Err(CosError::ShapeMismatch {
                    op: "adamw",
                    detail: format!("{name}: gradient has {} elements", g.len()),
                });
            }
            let wd = if decays(&name) { self.cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.eps);
                *x -= lr * (update + wd * *x);
            }
        }
        Ok(())
    }
}

/// Mean squared error over every sample, token and output channel, with
/// gradients in [`CosParams::named`] order.
pub fn loss_and_grads(rc: &RunConfig, params: &CosParams, data: &[Sample]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let mut total = None;
    for s in data {
        let levels = s
            .input
            .levels()
            .iter()
            .map(|m| tape.leaf(m.flattened()))
            .collect::<Result<Vec<_>>>()?;
        let out = forward_on_tape(&mut tape, &rc.model, &bound, &levels)?;
        let target = tape.leaf(s.target.clone())?;
        let diff = tape.sub(out, target)?;
        let sq = tape.mul(diff, diff)?;
        let mse = tape.mean(sq)?;
        total = Some(match total {
            None => mse,
            Some(acc) => tape.add(acc, mse)?,
        });
    }
    let total = total.ok_or(CosError::ZeroBatch)?;
    let loss = tape.scale(total, 1.0 / data.len() as f64)?;
    let mut grads = tape.backward(loss)?;
    let flat = params.flat_tensors();
    let grads = bound
        .vars()
        .into_iter()
        .zip(&flat)
        .map(|(v, like)| grads.take(v).unwrap_or_else(|| Tensor::zeros(like.shape())))
        .collect();
    Ok((tape.value(loss).data()[0], grads))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub visual_tokens: usize,
    pub steps: usize,
    /// Loss before each update.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    /// Loss after the last update.
    pub final_loss: f64,
}

/// Trains from `init`, or from parameters drawn with `rc.seed`.
pub fn train(rc: &RunConfig, init: Option<CosParams>) -> Result<(CosParams, TrainReport)> {
    rc.validate()?;
    let mut params = match init {
        Some(p) => {
            p.check_against(&rc.model)?;
            p
        }
        None => CosParams::random(&rc.model, &mut ChaCha8Rng::seed_from_u64(rc.seed))?,
    };
    let data = dataset(&rc.task, &rc.model, rc.batch)?;
    let mut opt = AdamW::new(rc.optimizer.clone(), &params, rc.steps);
    let mut losses = Vec::with_capacity(rc.steps);
    for step in 0..rc.steps {
        let (loss, grads) = match loss_and_grads(rc, &params, &data) {
            Err(CosError::NonFinite { .. }) => return Err(CosError::Divergence { step, loss: f64::NAN }),
            r => r?,
        };
        if !loss.is_finite() {
            return Err(CosError::Divergence { step, loss });
        }
        losses.push(loss);
        opt.step(&mut params, &grads)?;
    }
    let final_loss = match loss_and_grads(rc, &params, &data) {
        Err(CosError::NonFinite { .. }) => {
            return Err(CosError::Divergence {
                step: rc.steps,
                loss: f64::NAN,
            })
        }
        r => r?.0,
    };
    let initial_loss = losses.first().copied().unwrap_or(final_loss);
    Ok((
        params,
        TrainReport {
            visual_tokens: token_count(&rc.model)?,
            steps: rc.steps,
            losses,
            initial_loss,
            final_loss,
        },
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub token_ratio: f64,
    pub pretrain: TrainReport,
    pub preservation: PreservationReport,
    /// Target-config loss right after migration, before fine-tuning.
    pub migrated_loss: f64,
    pub finetune: TrainReport,
}

/// Trains on the plan's source config, migrates the weights and continues
/// training on the target config. Give both run configs the same task seeds
/// so that both stages see the same images.
pub fn pipeline(
    pretrain: &RunConfig,
    plan: &ScalePlan,
    finetune: &RunConfig,
) -> Result<(CosParams, PipelineReport)> {
    if pretrain.model != plan.source || finetune.model != plan.target {
        return Err(CosError::PlanMismatch(
            "run configs do not match the plan's source and target".into(),
        ));
    }
    let (small, pre) = train(pretrain, None)?;
    let migrated = migrate_params(&small, plan)?;
    let preservation = functional_preservation_check(&small, &migrated, plan, pretrain.seed)?;
    let data = dataset(&finetune.task, &finetune.model, finetune.batch)?;
    let migrated_loss = loss_and_grads(finetune, &migrated, &data)?.0;
    let (large, fine) = train(finetune, Some(migrated))?;
    Ok((
        large,
        PipelineReport {
            token_ratio: plan.token_ratio,
            pretrain: pre,
            preservation,
            migrated_loss,
            finetune: fine,
        },
    ))
}
