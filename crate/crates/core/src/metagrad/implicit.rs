use log::debug;

use super::{CrossHessianBlocks, Diagnostics, MetaGradient};
use crate::adapt::AdaptationResult;
use crate::data::TaskData;
use crate::error::{check_len, Error, Result};
use crate::models::TaskModel;
use crate::params::{MetaParams, ModulePartition};
use crate::solver::{cg_solve, CgConfig, CgOutcome};
use crate::vector::sub;

const STATIONARITY_TOL: f64 = 1e-3;

fn stationarity(adaptation: &AdaptationResult) -> (f64, bool) {
    let at_end = adaptation.converged_grad_norm;
    let at_start = adaptation.trace.first().map_or(0.0, |r| r.grad_norm);
    let flagged = at_end > STATIONARITY_TOL * (1.0 + at_start);
    if flagged {
        debug!("adapted parameters not stationary: ‖∇ℓ_tr(θ̂)‖ = {at_end:.3e}");
    }
    (at_end, flagged)
}

fn train_loss(adaptation: &AdaptationResult) -> f64 {
    adaptation.trace.last().map_or(f64::NAN, |r| r.train_loss)
}

/// Solves `(d̃I + Σ⁻¹ + ∇²ℓ(D^tr; θ̂)) v = g`.
fn solve_posterior_system(
    model: &dyn TaskModel,
    task: &TaskData,
    theta_hat: &[f64],
    precision: &[f64],
    rhs: &[f64],
    cg: &CgConfig,
) -> Result<CgOutcome> {
    cg_solve(
        |v| {
            let mut hv = model.hvp(theta_hat, &task.train, v)?;
            for ((h, vi), p) in hv.iter_mut().zip(v).zip(precision) {
                *h += p * vi;
            }
            Ok(hv)
        },
        rhs,
        cg,
    )
}

/// σ-iMAML: implicit gradient of `ℓ^val(θ̂(σ², φ))` with respect to
/// `(φ, log σ²)` at the adapted parameters.
pub fn sigma_imaml(
    model: &dyn TaskModel,
    task: &TaskData,
    meta: &MetaParams,
    partition: &ModulePartition,
    adaptation: &AdaptationResult,
    cg: &CgConfig,
) -> Result<MetaGradient> {
    meta.check(partition)?;
    let theta_hat = &adaptation.theta_hat;
    check_len("theta_hat", model.dim(), theta_hat.len())?;
    let (val_loss, g_val) = model.loss_and_grad(theta_hat, &task.val)?;
    let precision = partition.broadcast(&meta.precisions());
    let sol = solve_posterior_system(model, task, theta_hat, &precision, &g_val, cg)?;
    let blocks = CrossHessianBlocks::new(theta_hat, meta, partition)?;
    let (d_phi, d_log_sigma2) = blocks.pull_back(&sol.x);
    let (train_grad_norm, non_stationary) = stationarity(adaptation);
    let out = MetaGradient {
        d_phi,
        d_log_sigma2,
        diagnostics: Diagnostics {
            val_loss,
            train_loss: train_loss(adaptation),
            cg_iters: sol.iters,
            cg_residual: sol.residual,
            train_grad_norm,
            non_stationary,
        },
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("sigma-imaml meta-gradient"));
    }
    Ok(out)
}

/// σ-Reptile: `Δφ_m = (φ_m − θ̂_m)/σ²_m` from the joint-MAP adaptation
/// `phi_theta_hat`, with the σ² gradient taken from the implicit engine on
/// the train/validation split.
pub fn sigma_reptile(
    model: &dyn TaskModel,
    task: &TaskData,
    meta: &MetaParams,
    partition: &ModulePartition,
    adaptation: &AdaptationResult,
    phi_theta_hat: &[f64],
    cg: &CgConfig,
) -> Result<MetaGradient> {
    check_len("theta_hat", meta.phi.len(), phi_theta_hat.len())?;
    let mut out = sigma_imaml(model, task, meta, partition, adaptation, cg)?;
    let precision = partition.broadcast(&meta.precisions());
    out.d_phi = meta
        .phi
        .iter()
        .zip(phi_theta_hat)
        .zip(&precision)
        .map(|((f, t), p)| (f - t) * p)
        .collect();
    if !out.is_finite() {
        return Err(Error::NonFinite("sigma-reptile meta-gradient"));
    }
    Ok(out)
}

/// iMAML with shrinkage `λ` and damping `d` (taken from `cg.damping`):
/// `((1 + d)I + ∇²ℓ/λ)⁻¹ ∇ℓ^val(θ̂)`.
pub fn imaml(
    model: &dyn TaskModel,
    task: &TaskData,
    lambda: f64,
    partition: &ModulePartition,
    adaptation: &AdaptationResult,
    cg: &CgConfig,
) -> Result<MetaGradient> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("imaml lambda must be positive, got {lambda}")));
    }
    let theta_hat = &adaptation.theta_hat;
    check_len("theta_hat", model.dim(), theta_hat.len())?;
    let (val_loss, g_val) = model.loss_and_grad(theta_hat, &task.val)?;
    let sol = cg_solve(
        |v| {
            let mut hv = model.hvp(theta_hat, &task.train, v)?;
            for (h, vi) in hv.iter_mut().zip(v) {
                *h = *h / lambda + vi;
            }
            Ok(hv)
        },
        &g_val,
        cg,
    )?;
    let (train_grad_norm, non_stationary) = stationarity(adaptation);
    let out = MetaGradient {
        d_phi: sol.x,
        d_log_sigma2: vec![0.0; partition.len()],
        diagnostics: Diagnostics {
            val_loss,
            train_loss: train_loss(adaptation),
            cg_iters: sol.iters,
            cg_residual: sol.residual,
            train_grad_norm,
            non_stationary,
        },
    };
    if !out.is_finite() {
        return Err(Error::NonFinite("imaml meta-gradient"));
    }
    Ok(out)
}

/// Reptile: `Δφ = φ − θ̂`.
pub fn reptile(
    phi: &[f64],
    partition: &ModulePartition,
    adaptation: &AdaptationResult,
) -> Result<MetaGradient> {
    check_len("theta_hat", phi.len(), adaptation.theta_hat.len())?;
    let mut out = MetaGradient::zeros(phi.len(), partition.len());
    out.d_phi = sub(phi, &adaptation.theta_hat);
    out.diagnostics.train_loss = train_loss(adaptation);
    out.diagnostics.train_grad_norm = adaptation.converged_grad_norm;
    Ok(out)
}
