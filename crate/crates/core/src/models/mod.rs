//! Task models: a data loss `ℓ(D; θ)` with its exact gradient and
//! Hessian-vector product.
//!
//! The prior's contribution to the training objective is never part of a
//! model; callers add it (see [`crate::params::prior_terms`]).

mod gaussian;
mod mlp;

pub use gaussian::{swirl_transform, GaussianObsConfig, GaussianObsModel, ObsTransform};
pub use mlp::SinusoidMlp;

use crate::data::Batch;
use crate::error::{check_len, Error, Result};
use crate::params::ModulePartition;

pub trait TaskModel: Send + Sync {
    fn name(&self) -> &str;

    /// Number of parameters `D`.
    fn dim(&self) -> usize;

    fn default_partition(&self) -> ModulePartition;

    fn loss(&self, theta: &[f64], batch: &Batch) -> Result<f64>;

    fn grad(&self, theta: &[f64], batch: &Batch) -> Result<Vec<f64>>;

    fn loss_and_grad(&self, theta: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        Ok((self.loss(theta, batch)?, self.grad(theta, batch)?))
    }

    /// Data-loss Hessian times `v`.
    fn hvp(&self, theta: &[f64], batch: &Batch, v: &[f64]) -> Result<Vec<f64>>;
}

pub(crate) fn check_inputs(model: &dyn TaskModel, theta: &[f64], batch: &Batch) -> Result<()> {
    check_len("theta", model.dim(), theta.len())?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}
