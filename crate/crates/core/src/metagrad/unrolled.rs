use super::{Diagnostics, MetaGradient};
use crate::adapt::InnerConfig;
use crate::data::TaskData;
use crate::error::{check_len, Error, Result};
use crate::models::TaskModel;
use crate::optim::{InnerOptimizer, Schedule};
use crate::params::{MetaParams, ModulePartition};
use crate::vector::{all_finite, norm};

pub const DEFAULT_UNROLL_BUDGET: usize = 100;

/// Per-step quantities kept for the reverse pass.
struct Tape {
    thetas: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    /// Step size per step and coordinate.
    alphas: Vec<Vec<f64>>,
}

struct Unrolled {
    d_phi: Vec<f64>,
    /// Per-coordinate contribution to `∂ℓ^val/∂log σ²`.
    d_log_sigma2: Vec<f64>,
    /// Per-coordinate contribution to `∂ℓ^val/∂α`.
    d_alpha: Vec<f64>,
    val_loss: f64,
    train_loss: f64,
    train_grad_norm: f64,
}

/// Runs `steps` proximal GD steps from `φ`,
/// `θ_{k+1} = s ⊙ (θ_k − α_k ⊙ g_k − φ) + φ` with `s = 1/(1 + λα_k)`,
/// then backpropagates `∇ℓ^val(θ_L)` through every step.
fn unroll(
    model: &dyn TaskModel,
    task: &TaskData,
    phi: &[f64],
    lambda: &[f64],
    base_alpha: &[f64],
    schedule: Schedule,
    steps: usize,
    budget: usize,
) -> Result<Unrolled> {
    if steps > budget {
        return Err(Error::UnrollBudget { steps, budget });
    }
    let dim = model.dim();
    check_len("phi", dim, phi.len())?;

    let mut tape = Tape {
        thetas: Vec::with_capacity(steps + 1),
        grads: Vec::with_capacity(steps),
        alphas: Vec::with_capacity(steps),
    };
    let mut theta = phi.to_vec();
    for k in 0..steps {
        let g = model.grad(&theta, &task.train)?;
        let f = schedule.factor(k, steps);
        let alpha: Vec<f64> = base_alpha.iter().map(|a| a * f).collect();
        let next: Vec<f64> = (0..dim)
            .map(|i| {
                let half = theta[i] - alpha[i] * g[i];
                if lambda[i] == 0.0 {
                    half
                } else {
                    (half - phi[i]) / (1.0 + lambda[i] * alpha[i]) + phi[i]
                }
            })
            .collect();
        if !all_finite(&next) {
            return Err(Error::NonFinite("unrolled inner iterate"));
        }
        tape.thetas.push(std::mem::replace(&mut theta, next));
        tape.grads.push(g);
        tape.alphas.push(alpha);
    }

    let (train_loss, g_tr) = model.loss_and_grad(&theta, &task.train)?;
    let full: Vec<f64> = (0..dim)
        .map(|i| g_tr[i] + lambda[i] * (theta[i] - phi[i]))
        .collect();
    let (val_loss, mut adj) = model.loss_and_grad(&theta, &task.val)?;

    let mut d_phi = vec![0.0; dim];
    let mut d_log_sigma2 = vec![0.0; dim];
    let mut d_alpha = vec![0.0; dim];
    for k in (0..steps).rev() {
        let (th, g, alpha) = (&tape.thetas[k], &tape.grads[k], &tape.alphas[k]);
        let factor = schedule.factor(k, steps);
        let mut b = vec![0.0; dim];
        for i in 0..dim {
            let half = th[i] - alpha[i] * g[i];
            let s = 1.0 / (1.0 + lambda[i] * alpha[i]);
            let a = adj[i];
            d_phi[i] += (1.0 - s) * a;
            let centered = half - phi[i];
            d_log_sigma2[i] += a * centered * s * (1.0 - s);
            b[i] = s * a;
            // ∂s/∂α = −λ s²; α_k = factor · α
            d_alpha[i] += factor * (-b[i] * g[i] - a * centered * lambda[i] * s * s);
        }
        let scaled: Vec<f64> = b.iter().zip(alpha).map(|(bi, ai)| bi * ai).collect();
        let hb = if scaled.iter().all(|v| *v == 0.0) {
            vec![0.0; dim]
        } else {
            model.hvp(th, &task.train, &scaled)?
        };
        for i in 0..dim {
            adj[i] = b[i] - hb[i];
        }
    }
    for i in 0..dim {
        d_phi[i] += adj[i];
    }
    Ok(Unrolled {
        d_phi,
        d_log_sigma2,
        d_alpha,
        val_loss,
        train_loss,
        train_grad_norm: norm(&full),
    })
}

fn sum_modules(per_coord: &[f64], partition: &ModulePartition) -> Vec<f64> {
    (0..partition.len())
        .map(|m| per_coord[partition.range(m)].iter().sum())
        .collect()
}

fn require_gd(inner: &InnerConfig) -> Result<()> {
    match inner.optimizer {
        InnerOptimizer::Gd => Ok(()),
        InnerOptimizer::Adam { .. } => Err(Error::Unsupported(
            "unrolled meta-gradients support the proximal GD inner optimizer only".into(),
        )),
    }
}

fn finish(u: Unrolled, d_log_sigma2: Vec<f64>, what: &'static str) -> Result<MetaGradient> {
    let out = MetaGradient {
        d_phi: u.d_phi,
        d_log_sigma2,
        diagnostics: Diagnostics {
            val_loss: u.val_loss,
            train_loss: u.train_loss,
            train_grad_norm: u.train_grad_norm,
            ..Default::default()
        },
    };
    if !out.is_finite() {
        return Err(Error::NonFinite(what));
    }
    Ok(out)
}

/// σ-MAML: exact gradient of `ℓ^val` through `L` unrolled proximal GD
/// steps, including the dependence of every shrink factor on σ².
pub fn sigma_maml(
    model: &dyn TaskModel,
    task: &TaskData,
    meta: &MetaParams,
    partition: &ModulePartition,
    inner: &InnerConfig,
    budget: usize,
) -> Result<MetaGradient> {
    require_gd(inner)?;
    meta.check(partition)?;
    let lambda = partition.broadcast(&meta.precisions());
    let alpha = vec![inner.step_size; model.dim()];
    let u = unroll(model, task, &meta.phi, &lambda, &alpha, inner.schedule, inner.steps, budget)?;
    let d_ls = sum_modules(&u.d_log_sigma2, partition);
    finish(u, d_ls, "sigma-maml meta-gradient")
}

/// MAML: gradient with respect to `φ` through `L` plain GD steps.
pub fn maml(
    model: &dyn TaskModel,
    task: &TaskData,
    phi: &[f64],
    partition: &ModulePartition,
    inner: &InnerConfig,
    budget: usize,
) -> Result<MetaGradient> {
    require_gd(inner)?;
    let dim = model.dim();
    let alpha = vec![inner.step_size; dim];
    let u = unroll(model, task, phi, &vec![0.0; dim], &alpha, inner.schedule, inner.steps, budget)?;
    finish(u, vec![0.0; partition.len()], "maml meta-gradient")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaSgdGradient {
    pub grad: MetaGradient,
    /// Gradient with respect to each module's inner learning rate.
    pub d_alpha: Vec<f64>,
}

/// Meta-SGD with one learned inner learning rate per module.
pub fn metasgd(
    model: &dyn TaskModel,
    task: &TaskData,
    phi: &[f64],
    alphas: &[f64],
    partition: &ModulePartition,
    steps: usize,
    budget: usize,
) -> Result<MetaSgdGradient> {
    check_len("alphas", partition.len(), alphas.len())?;
    check_len("partition", model.dim(), partition.dim())?;
    let dim = model.dim();
    let alpha = partition.broadcast(alphas);
    let u = unroll(model, task, phi, &vec![0.0; dim], &alpha, Schedule::Constant, steps, budget)?;
    let d_alpha = sum_modules(&u.d_alpha, partition);
    let grad = finish(u, vec![0.0; partition.len()], "meta-sgd meta-gradient")?;
    if !all_finite(&d_alpha) {
        return Err(Error::NonFinite("meta-sgd learning-rate gradient"));
    }
    Ok(MetaSgdGradient { grad, d_alpha })
}
