//! Task adaptation: MAP estimation of `θ̂_t(σ², φ)` by a fixed number of
//! proximal optimizer steps started at `φ`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{check_len, Error, Result};
use crate::models::TaskModel;
use crate::optim::{prox_adam_step, prox_gd_step, AdamState, InnerOptimizer, ProxConfig, Schedule};
use crate::params::{MetaParams, ModulePartition};
use crate::vector::norm;

/// Inner-loop settings shared by every adaptation in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    pub optimizer: InnerOptimizer,
    pub step_size: f64,
    pub steps: usize,
    #[serde(default)]
    pub schedule: Schedule,
}

impl InnerConfig {
    pub fn gd(step_size: f64, steps: usize) -> Self {
        Self {
            optimizer: InnerOptimizer::Gd,
            step_size,
            steps,
            schedule: Schedule::Constant,
        }
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        Self {
            steps,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Data loss on the training batch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Norm of the full training-objective gradient (data + prior).
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationResult {
    pub theta_hat: Vec<f64>,
    /// One record per visited iterate, initial point included.
    pub trace: Vec<TraceRecord>,
    pub converged_grad_norm: f64,
}

impl AdaptationResult {
    pub fn val_trajectory(&self) -> Vec<f64> {
        self.trace.iter().filter_map(|r| r.val_loss).collect()
    }
}

/// Optional extras for [`adapt_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct AdaptOptions<'a> {
    /// Evaluate this batch at every iterate.
    pub val: Option<&'a Batch>,
    /// Per-coordinate mask; `true` coordinates stay at the center exactly.
    pub frozen: Option<&'a [bool]>,
}

/// Adapts with shrinkage strengths `λ_m = 1/σ²_m` toward `meta.phi`.
pub fn adapt(
    model: &dyn TaskModel,
    train: &Batch,
    meta: &MetaParams,
    partition: &ModulePartition,
    inner: &InnerConfig,
) -> Result<AdaptationResult> {
    meta.check(partition)?;
    adapt_with(
        model,
        train,
        &meta.phi,
        &meta.precisions(),
        partition,
        inner,
        AdaptOptions::default(),
    )
}

/// Adapts from `center` with explicit per-module shrinkage strengths.
/// `lambda = 0` gives unregularized gradient descent (or Adam).
pub fn adapt_with(
    model: &dyn TaskModel,
    train: &Batch,
    center: &[f64],
    lambda_per_module: &[f64],
    partition: &ModulePartition,
    inner: &InnerConfig,
    opts: AdaptOptions<'_>,
) -> Result<AdaptationResult> {
    check_len("center", model.dim(), center.len())?;
    check_len("partition", model.dim(), partition.dim())?;
    let mut prox = ProxConfig::new(
        inner.step_size,
        lambda_per_module,
        center.to_vec(),
        partition,
    )?;
    if let Some(frozen) = opts.frozen {
        check_len("frozen mask", model.dim(), frozen.len())?;
        for (lam, &f) in prox.lambda.iter_mut().zip(frozen) {
            if f {
                *lam = 0.0;
            }
        }
    }

    let mut theta = center.to_vec();
    let mut adam = match inner.optimizer {
        InnerOptimizer::Adam { beta1, beta2, eps } => {
            Some(AdamState::with_params(theta.len(), beta1, beta2, eps))
        }
        InnerOptimizer::Gd => None,
    };
    let mut trace = Vec::with_capacity(inner.steps + 1);

    for step in 0..=inner.steps {
        let (loss, mut grad) = model.loss_and_grad(&theta, train)?;
        if let Some(frozen) = opts.frozen {
            for (g, &f) in grad.iter_mut().zip(frozen) {
                if f {
                    *g = 0.0;
                }
            }
        }
        let full: Vec<f64> = grad
            .iter()
            .zip(&theta)
            .zip(prox.lambda.iter().zip(center))
            .map(|((g, t), (lam, c))| g + lam * (t - c))
            .collect();
        let val_loss = match opts.val {
            Some(v) => Some(model.loss(&theta, v)?),
            None => None,
        };
        let record = TraceRecord {
            step,
            train_loss: loss,
            val_loss,
            grad_norm: norm(&full),
        };
        let finite = loss.is_finite() && record.grad_norm.is_finite();
        trace.push(record);
        if !finite {
            return Err(Error::Diverged {
                step,
                trace: Box::new(trace),
            });
        }
        if step == inner.steps {
            break;
        }

        prox.step_size = inner.step_size * inner.schedule.factor(step, inner.steps);
        theta = match adam.as_mut() {
            None => prox_gd_step(&theta, &grad, &prox),
            Some(state) => {
                let (next, st) = prox_adam_step(&theta, &grad, state, &prox);
                *state = st;
                next
            }
        };
        if let Some(frozen) = opts.frozen {
            for ((t, &f), c) in theta.iter_mut().zip(frozen).zip(center) {
                if f {
                    *t = *c;
                }
            }
        }
    }

    let converged_grad_norm = trace.last().map_or(f64::NAN, |r| r.grad_norm);
    Ok(AdaptationResult {
        theta_hat: theta,
        trace,
        converged_grad_norm,
    })
}

/// Validation loss `ℓ^val(θ)`.
pub fn evaluate(model: &dyn TaskModel, theta: &[f64], batch: &Batch) -> Result<f64> {
    model.loss(theta, batch)
}

/// Writes `step,train_loss,val_loss,grad_norm` rows; a missing validation
/// loss is written as an empty field.
pub fn write_trace_csv<W: Write>(trace: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "train_loss", "val_loss", "grad_norm"])?;
    for r in trace {
        w.write_record([
            r.step.to_string(),
            r.train_loss.to_string(),
            r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            r.grad_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
