//! Per-task meta-gradient engines.
//!
//! Implicit engines (`sigma_imaml`, `sigma_reptile`, `imaml`) differentiate
//! through the stationarity condition of the adapted parameters; unrolled
//! engines (`sigma_maml`, `maml`, `metasgd`) backpropagate through every
//! inner step. All σ² gradients are with respect to `log σ²`.

mod implicit;
mod unrolled;

pub use implicit::{imaml, reptile, sigma_imaml, sigma_reptile};
pub use unrolled::{maml, metasgd, sigma_maml, MetaSgdGradient, DEFAULT_UNROLL_BUDGET};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::params::{MetaParams, ModulePartition};
use crate::vector::all_finite;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `ℓ^val` at the adapted parameters.
    pub val_loss: f64,
    pub train_loss: f64,
    pub cg_iters: usize,
    pub cg_residual: f64,
    /// Full training-objective gradient norm at `θ̂`.
    pub train_grad_norm: f64,
    /// Set when `θ̂` is too far from stationarity for the implicit gradient.
    pub non_stationary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    pub d_phi: Vec<f64>,
    pub d_log_sigma2: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl MetaGradient {
    pub fn zeros(dim: usize, modules: usize) -> Self {
        Self {
            d_phi: vec![0.0; dim],
            d_log_sigma2: vec![0.0; modules],
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.d_phi) && all_finite(&self.d_log_sigma2)
    }
}

/// Closed-form mixed second derivatives of the training objective
/// `ℓ^tr(θ) = ℓ(D; θ) + Σ_m ‖θ_m − φ_m‖²/(2σ²_m) + const`:
///
/// * `∂²ℓ^tr/∂θ∂φ` is diagonal with entries `−1/σ²_m`;
/// * `∂²ℓ^tr/∂θ∂log σ²_m` is the column `−(θ_m − φ_m)/σ²_m` supported on
///   module `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossHessianBlocks {
    pub theta_phi_diag: Vec<f64>,
    /// Per-coordinate entry of the coordinate's own module column.
    pub theta_log_sigma2: Vec<f64>,
    partition: ModulePartition,
}

impl CrossHessianBlocks {
    pub fn new(theta: &[f64], meta: &MetaParams, partition: &ModulePartition) -> Result<Self> {
        meta.check(partition)?;
        check_len("theta", partition.dim(), theta.len())?;
        let precision = partition.broadcast(&meta.precisions());
        let theta_phi_diag = precision.iter().map(|p| -p).collect();
        let theta_log_sigma2 = theta
            .iter()
            .zip(&meta.phi)
            .zip(&precision)
            .map(|((t, f), p)| -(t - f) * p)
            .collect();
        Ok(Self {
            theta_phi_diag,
            theta_log_sigma2,
            partition: partition.clone(),
        })
    }

    /// Dense column `∂(∇_θ ℓ^tr)/∂log σ²_m`.
    pub fn log_sigma2_column(&self, m: usize) -> Vec<f64> {
        let mut col = vec![0.0; self.theta_log_sigma2.len()];
        let r = self.partition.range(m);
        col[r.clone()].copy_from_slice(&self.theta_log_sigma2[r]);
        col
    }

    /// `−vᵀ H_{θΦ}`: the meta-gradient for `v = H_{θθ}⁻¹ ∇ℓ^val`.
    pub fn pull_back(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d_phi = v
            .iter()
            .zip(&self.theta_phi_diag)
            .map(|(vi, h)| -vi * h)
            .collect();
        let d_log_sigma2 = (0..self.partition.len())
            .map(|m| {
                let r = self.partition.range(m);
                -v[r.clone()]
                    .iter()
                    .zip(&self.theta_log_sigma2[r])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect();
        (d_phi, d_log_sigma2)
    }
}
