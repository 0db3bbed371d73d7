//! Inner-loop optimizers with a closed-form L2 proximal step toward `φ`.
//!
//! Every step first takes an ordinary GD or Adam step on the data loss and
//! then solves the L2-regularized subproblem exactly, shrinking each
//! coordinate toward the center with the module's strength `λ_m = 1/σ²_m`.
//! `λ_m = 0` means no shrinkage and leaves the plain step untouched.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::params::ModulePartition;

/// Step size, per-coordinate shrinkage strengths and the shrinkage center.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxConfig {
    pub step_size: f64,
    /// `λ` broadcast to coordinates.
    pub lambda: Vec<f64>,
    pub center: Vec<f64>,
}

impl ProxConfig {
    pub fn new(
        step_size: f64,
        lambda_per_module: &[f64],
        center: Vec<f64>,
        partition: &ModulePartition,
    ) -> Result<Self> {
        check_len("lambda", partition.len(), lambda_per_module.len())?;
        check_len("center", partition.dim(), center.len())?;
        Ok(Self {
            step_size,
            lambda: partition.broadcast(lambda_per_module),
            center,
        })
    }

    pub fn uniform(step_size: f64, lambda: f64, center: Vec<f64>) -> Self {
        Self {
            step_size,
            lambda: vec![lambda; center.len()],
            center,
        }
    }

    pub fn with_step_size(&self, step_size: f64) -> Self {
        Self {
            step_size,
            ..self.clone()
        }
    }
}

#[inline]
fn shrink(half: f64, center: f64, factor: f64) -> f64 {
    (half - center) / factor + center
}

/// One proximal gradient step:
/// `θ½ = θ − α g`, `θ' = (θ½ − φ)/(1 + λα) + φ`.
pub fn prox_gd_step(theta: &[f64], grad: &[f64], cfg: &ProxConfig) -> Vec<f64> {
    let a = cfg.step_size;
    theta
        .iter()
        .zip(grad)
        .zip(cfg.lambda.iter().zip(&cfg.center))
        .map(|((&t, &g), (&lam, &c))| {
            let half = t - a * g;
            if lam == 0.0 {
                half
            } else {
                shrink(half, c, 1.0 + lam * a)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self::with_params(dim, 0.9, 0.999, 1e-8)
    }

    pub fn with_params(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// Standard bias-corrected Adam step. Updates `state` in place and returns
/// the new parameters together with the bias-corrected second moment `v̂`.
pub fn adam_step(
    theta: &[f64],
    grad: &[f64],
    state: &mut AdamState,
    step_size: f64,
) -> (Vec<f64>, Vec<f64>) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let mut out = Vec::with_capacity(theta.len());
    let mut v_hat = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let vh = state.v[i] / c2;
        out.push(theta[i] - step_size * m_hat / (vh.sqrt() + state.eps));
        v_hat.push(vh);
    }
    (out, v_hat)
}

/// Proximal Adam: an Adam step followed by the shrink
/// `θ' = (θ½ − φ)/(1 + λα/√(v̂' + ε)) + φ`, using the updated `v̂'`.
pub fn prox_adam_step(
    theta: &[f64],
    grad: &[f64],
    state: &AdamState,
    cfg: &ProxConfig,
) -> (Vec<f64>, AdamState) {
    let mut next = state.clone();
    let (half, v_hat) = adam_step(theta, grad, &mut next, cfg.step_size);
    let a = cfg.step_size;
    let eps = next.eps;
    let theta = half
        .iter()
        .zip(&v_hat)
        .zip(cfg.lambda.iter().zip(&cfg.center))
        .map(|((&h, &vh), (&lam, &c))| {
            if lam == 0.0 {
                h
            } else {
                shrink(h, c, 1.0 + lam * a / (vh + eps).sqrt())
            }
        })
        .collect();
    (theta, next)
}

/// Inner optimizer choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InnerOptimizer {
    Gd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl InnerOptimizer {
    pub fn adam() -> Self {
        InnerOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step-size schedule over a fixed horizon.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear decay from the base rate to `final_fraction` of it at the end
    /// of the horizon.
    Linear { final_fraction: f64 },
}

impl Schedule {
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::Linear { final_fraction } => {
                if total <= 1 {
                    return 1.0;
                }
                let frac = step.min(total - 1) as f64 / (total - 1) as f64;
                1.0 - (1.0 - final_fraction) * frac
            }
        }
    }
}
