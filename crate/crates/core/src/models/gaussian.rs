use num_dual::{Dual64, DualNum};
use serde::{Deserialize, Serialize};

use super::{check_inputs, TaskModel};
use crate::data::Batch;
use crate::error::{check_len, Error, Result};
use crate::params::ModulePartition;

/// Mean map `μ(θ)` of the Gaussian observation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ObsTransform {
    /// `μ(θ) = θ`.
    Identity,
    /// `μ(θ) = [I_D, 1_D/√D]ᵀ θ`: the parameters plus their scaled sum as a
    /// final observation coordinate.
    SumAugmented,
    /// `μ(θ) = A θ` for an explicit matrix (rows are observation coordinates).
    Linear { matrix: Vec<Vec<f64>> },
    /// Rotates each consecutive pair of parameters by `ω·‖pair‖`.
    Swirl { omega: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianObsConfig {
    pub transform: ObsTransform,
    /// Per observation-coordinate noise variances `ξ²_d`.
    pub xi2: Vec<f64>,
}

/// Observations `x ~ N(μ(θ), diag(ξ²))`.
///
/// The loss is the negative log-likelihood summed over the batch without the
/// normalizing constant `½ Σ_d log(2π ξ²_d)` per observation:
/// `ℓ(θ) = Σ_n Σ_d (x_{n,d} − μ_d(θ))² / (2 ξ²_d)`.
#[derive(Debug, Clone)]
pub struct GaussianObsModel {
    config: GaussianObsConfig,
    dim: usize,
    // Dense map for the affine transforms; `None` for swirl.
    matrix: Option<Vec<Vec<f64>>>,
    name: String,
}

impl GaussianObsModel {
    pub fn new(config: GaussianObsConfig, dim: usize) -> Result<Self> {
        if config.xi2.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Contract("observation variances must be > 0".into()));
        }
        let (matrix, name) = match &config.transform {
            ObsTransform::Identity => {
                let m = (0..dim)
                    .map(|r| (0..dim).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
                    .collect();
                (Some(m), "gaussian-identity")
            }
            ObsTransform::SumAugmented => {
                let mut m: Vec<Vec<f64>> = (0..dim)
                    .map(|r| (0..dim).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
                    .collect();
                m.push(vec![1.0 / (dim as f64).sqrt(); dim]);
                (Some(m), "gaussian-sum-augmented")
            }
            ObsTransform::Linear { matrix } => {
                if matrix.iter().any(|row| row.len() != dim) {
                    return Err(Error::Contract(format!(
                        "linear transform rows must have {dim} columns"
                    )));
                }
                (Some(matrix.clone()), "gaussian-linear")
            }
            ObsTransform::Swirl { .. } => {
                if !dim.is_multiple_of(2) {
                    return Err(Error::Contract(format!(
                        "swirl transform needs an even dimension, got {dim}"
                    )));
                }
                (None, "gaussian-swirl")
            }
        };
        let obs_dim = matrix.as_ref().map_or(dim, |m| m.len());
        check_len("xi2", obs_dim, config.xi2.len())?;
        Ok(Self {
            config,
            dim,
            matrix,
            name: name.to_string(),
        })
    }

    /// Univariate-normal style model: `x ~ N(θ, ξ² I)`.
    pub fn identity(dim: usize, xi2: f64) -> Result<Self> {
        Self::new(
            GaussianObsConfig {
                transform: ObsTransform::Identity,
                xi2: vec![xi2; dim],
            },
            dim,
        )
    }

    pub fn config(&self) -> &GaussianObsConfig {
        &self.config
    }

    pub fn obs_dim(&self) -> usize {
        self.config.xi2.len()
    }

    /// Mean of the observations for parameters `theta`.
    pub fn mean(&self, theta: &[f64]) -> Vec<f64> {
        match (&self.matrix, &self.config.transform) {
            (Some(a), _) => a
                .iter()
                .map(|row| row.iter().zip(theta).map(|(r, t)| r * t).sum())
                .collect(),
            (None, ObsTransform::Swirl { omega }) => swirl_pairs(theta, *omega),
            _ => unreachable!(),
        }
    }

    fn sufficient(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let d = self.obs_dim();
        let mut sum = vec![0.0; d];
        for x in &batch.x {
            check_len("observation", d, x.len())?;
            for (s, v) in sum.iter_mut().zip(x) {
                *s += v;
            }
        }
        Ok((batch.len() as f64, sum))
    }

    // (N μ − Σ x) / ξ², the weighted residual that the gradient back-projects.
    fn weighted_residual<D: DualNum<Primitive = f64> + Copy>(
        &self,
        mu: &[D],
        n: f64,
        sum: &[f64],
    ) -> Vec<D> {
        mu.iter()
            .zip(sum)
            .zip(&self.config.xi2)
            .map(|((&m, &s), &xi2)| (m * n - s) / xi2)
            .collect()
    }

    fn swirl_grad<D: DualNum<Primitive = f64> + Copy>(
        &self,
        theta: &[D],
        omega: f64,
        n: f64,
        sum: &[f64],
    ) -> Vec<D> {
        let mut grad = vec![D::from(0.0); theta.len()];
        for p in (0..theta.len()).step_by(2) {
            let (a, b) = (theta[p], theta[p + 1]);
            let r2 = a * a + b * b;
            let r = if r2.re() > 0.0 { r2.sqrt() } else { D::from(0.0) };
            let (s, c) = (r * omega).sin_cos();
            let mu1 = c * a - s * b;
            let mu2 = s * a + c * b;
            // Jacobian of the pair map; the ω-terms vanish at the origin.
            let (ka, kb) = if r.re() > 0.0 {
                (a * omega / r, b * omega / r)
            } else {
                (D::from(0.0), D::from(0.0))
            };
            let j11 = c - ka * mu2;
            let j12 = -s - kb * mu2;
            let j21 = s + ka * mu1;
            let j22 = c + kb * mu1;
            let e1 = (mu1 * n - sum[p]) / self.config.xi2[p];
            let e2 = (mu2 * n - sum[p + 1]) / self.config.xi2[p + 1];
            grad[p] = j11 * e1 + j21 * e2;
            grad[p + 1] = j12 * e1 + j22 * e2;
        }
        grad
    }
}

fn swirl_pairs(theta: &[f64], omega: f64) -> Vec<f64> {
    let mut out = vec![0.0; theta.len()];
    for p in (0..theta.len()).step_by(2) {
        let (a, b) = (theta[p], theta[p + 1]);
        let (s, c) = (omega * a.hypot(b)).sin_cos();
        out[p] = c * a - s * b;
        out[p + 1] = s * a + c * b;
    }
    out
}

/// Rotates each consecutive non-overlapping pair `(θ_d, θ_{d+1})` by the
/// angle `ω·√(θ_d² + θ_{d+1}²)`.
pub fn swirl_transform(theta: &[f64], omega: f64) -> Result<Vec<f64>> {
    if !theta.len().is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "swirl transform needs an even dimension, got {}",
            theta.len()
        )));
    }
    Ok(swirl_pairs(theta, omega))
}

impl TaskModel for GaussianObsModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn default_partition(&self) -> ModulePartition {
        ModulePartition::per_coordinate(self.dim).expect("dim >= 1")
    }

    fn loss(&self, theta: &[f64], batch: &Batch) -> Result<f64> {
        check_inputs(self, theta, batch)?;
        let mu = self.mean(theta);
        let mut total = 0.0;
        for x in &batch.x {
            check_len("observation", mu.len(), x.len())?;
            for ((xv, m), xi2) in x.iter().zip(&mu).zip(&self.config.xi2) {
                let r = xv - m;
                total += r * r / (2.0 * xi2);
            }
        }
        Ok(total)
    }

    fn grad(&self, theta: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        check_inputs(self, theta, batch)?;
        let (n, sum) = self.sufficient(batch)?;
        match (&self.matrix, &self.config.transform) {
            (Some(a), _) => {
                let e = self.weighted_residual(&self.mean(theta), n, &sum);
                let mut g = vec![0.0; self.dim];
                for (row, ei) in a.iter().zip(&e) {
                    for (gj, aij) in g.iter_mut().zip(row) {
                        *gj += aij * ei;
                    }
                }
                Ok(g)
            }
            (None, ObsTransform::Swirl { omega }) => Ok(self.swirl_grad(theta, *omega, n, &sum)),
            _ => unreachable!(),
        }
    }

    fn hvp(&self, theta: &[f64], batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        check_inputs(self, theta, batch)?;
        check_len("v", self.dim, v.len())?;
        let (n, sum) = self.sufficient(batch)?;
        match (&self.matrix, &self.config.transform) {
            (Some(a), _) => {
                // N Aᵀ Ξ⁻¹ A v
                let mut out = vec![0.0; self.dim];
                for (row, xi2) in a.iter().zip(&self.config.xi2) {
                    let av: f64 = row.iter().zip(v).map(|(r, x)| r * x).sum();
                    let w = n * av / xi2;
                    for (o, r) in out.iter_mut().zip(row) {
                        *o += r * w;
                    }
                }
                Ok(out)
            }
            (None, ObsTransform::Swirl { omega }) => {
                let dual: Vec<Dual64> = theta
                    .iter()
                    .zip(v)
                    .map(|(&t, &d)| Dual64::new(t, d))
                    .collect();
                Ok(self
                    .swirl_grad(&dual, *omega, n, &sum)
                    .iter()
                    .map(|g| g.eps)
                    .collect())
            }
            _ => unreachable!(),
        }
    }
}
