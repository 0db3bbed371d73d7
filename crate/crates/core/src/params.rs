//! Modular parameter layout and the Gaussian shrinkage prior.
//!
//! A flat parameter vector of length `D` is split into `M` named modules.
//! Every module `m` carries one prior variance `σ²_m`, stored as `log σ²_m`
//! so positivity holds by construction; all gradients with respect to the
//! variances are expressed in log coordinates.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::vector::all_finite;

/// Lower clip for every module variance.
pub const SIGMA2_MIN: f64 = 1e-5;
/// Upper clip for every module variance.
pub const SIGMA2_MAX: f64 = 1e5;

/// Shape of the inverse-Gamma hyperprior on `σ²_m`.
pub const IG_SHAPE: f64 = 1.0;

/// A named half-open index range `[start, end)` of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Module {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl Module {
    pub fn new(name: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            name: name.into(),
            start,
            end,
        }
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Deserialize)]
struct RawPartition {
    modules: Vec<Module>,
    dim: usize,
}

/// Disjoint modules whose ranges tile `[0, D)` exactly.
///
/// Modules may be listed in any order; the listed order is the module
/// index `m` used by [`MetaParams::log_sigma2`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPartition")]
pub struct ModulePartition {
    modules: Vec<Module>,
    dim: usize,
}

impl TryFrom<RawPartition> for ModulePartition {
    type Error = Error;

    fn try_from(raw: RawPartition) -> Result<Self> {
        ModulePartition::new(raw.modules, raw.dim)
    }
}

impl ModulePartition {
    pub fn new(modules: Vec<Module>, dim: usize) -> Result<Self> {
        if modules.is_empty() {
            return Err(Error::Contract("partition needs at least one module".into()));
        }
        let mut order: Vec<&Module> = modules.iter().collect();
        order.sort_by_key(|m| m.start);
        let mut cursor = 0;
        for m in order {
            if m.is_empty() {
                return Err(Error::Contract(format!("module `{}` is empty", m.name)));
            }
            if m.start != cursor {
                return Err(Error::Contract(format!(
                    "module `{}` starts at {} but the previous module ends at {}",
                    m.name, m.start, cursor
                )));
            }
            cursor = m.end;
        }
        if cursor != dim {
            return Err(Error::Contract(format!(
                "modules cover [0, {cursor}) but the dimension is {dim}"
            )));
        }
        Ok(Self { modules, dim })
    }

    /// Consecutive modules of the given sizes, in order.
    pub fn from_sizes<S: AsRef<str>>(sizes: &[(S, usize)]) -> Result<Self> {
        let mut start = 0;
        let modules = sizes
            .iter()
            .map(|(name, len)| {
                let m = Module::new(name.as_ref(), start, start + len);
                start += len;
                m
            })
            .collect();
        Self::new(modules, start)
    }

    /// One module per coordinate, named `d0, d1, ...`.
    pub fn per_coordinate(dim: usize) -> Result<Self> {
        let sizes: Vec<(String, usize)> = (0..dim).map(|i| (format!("d{i}"), 1)).collect();
        Self::from_sizes(&sizes)
    }

    /// A single module covering everything.
    pub fn single(dim: usize) -> Result<Self> {
        Self::from_sizes(&[("all", dim)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of modules `M`.
    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn modules(&self) -> &[Module] {
        &self.modules
    }

    pub fn range(&self, m: usize) -> Range<usize> {
        self.modules[m].range()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.modules.iter().map(|m| m.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.modules.iter().position(|m| m.name == name)
    }

    /// Expands one value per module into one value per coordinate.
    pub fn broadcast(&self, per_module: &[f64]) -> Vec<f64> {
        assert_eq!(per_module.len(), self.len(), "one value per module");
        let mut out = vec![0.0; self.dim];
        for (m, value) in self.modules.iter().zip(per_module) {
            out[m.range()].fill(*value);
        }
        out
    }

    /// Per-coordinate mask that is `true` inside the listed modules.
    pub fn coordinate_mask(&self, modules: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; self.dim];
        for &m in modules {
            mask[self.range(m)].fill(true);
        }
        mask
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Task-adapted parameters `θ_t`.
pub type TaskParams = Vec<f64>;

/// Meta parameters: prior mean `φ` and per-module `log σ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub phi: Vec<f64>,
    pub log_sigma2: Vec<f64>,
}

impl MetaParams {
    pub fn new(phi: Vec<f64>, log_sigma2: Vec<f64>) -> Self {
        Self { phi, log_sigma2 }
    }

    pub fn from_sigma2(phi: Vec<f64>, sigma2: &[f64]) -> Self {
        Self {
            phi,
            log_sigma2: sigma2.iter().map(|s| s.ln()).collect(),
        }
    }

    /// Same variance on every module of `partition`.
    pub fn uniform(phi: Vec<f64>, sigma2: f64, modules: usize) -> Self {
        Self {
            phi,
            log_sigma2: vec![sigma2.ln(); modules],
        }
    }

    pub fn sigma2(&self, m: usize) -> f64 {
        self.log_sigma2[m].exp()
    }

    pub fn sigma2_vec(&self) -> Vec<f64> {
        self.log_sigma2.iter().map(|l| l.exp()).collect()
    }

    /// Prior precision `λ_m = 1/σ²_m` per module.
    pub fn precisions(&self) -> Vec<f64> {
        self.log_sigma2.iter().map(|l| (-l).exp()).collect()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.phi) && all_finite(&self.log_sigma2)
    }

    pub fn check(&self, partition: &ModulePartition) -> Result<()> {
        check_len("phi", partition.dim(), self.phi.len())?;
        check_len("log_sigma2", partition.len(), self.log_sigma2.len())
    }
}

/// Projects every `σ²_m` into `[SIGMA2_MIN, SIGMA2_MAX]`; `φ` is untouched.
pub fn clip_sigma2(meta: &MetaParams) -> MetaParams {
    let (lo, hi) = (SIGMA2_MIN.ln(), SIGMA2_MAX.ln());
    MetaParams {
        phi: meta.phi.clone(),
        log_sigma2: meta.log_sigma2.iter().map(|l| l.clamp(lo, hi)).collect(),
    }
}

/// Negative log prior density and its exact gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTerms {
    pub nll: f64,
    pub grad_theta: Vec<f64>,
    pub grad_phi: Vec<f64>,
    pub grad_log_sigma2: Vec<f64>,
}

/// `-log p(θ | σ², φ) = Σ_m (D_m/2) log(2π σ²_m) + ‖θ_m − φ_m‖² / (2σ²_m)`.
pub fn prior_terms(
    theta: &[f64],
    meta: &MetaParams,
    partition: &ModulePartition,
) -> Result<PriorTerms> {
    check_len("theta", partition.dim(), theta.len())?;
    meta.check(partition)?;
    let d = partition.dim();
    let mut grad_theta = vec![0.0; d];
    let mut grad_log_sigma2 = vec![0.0; partition.len()];
    let mut nll = 0.0;
    for (m, module) in partition.modules().iter().enumerate() {
        let sigma2 = meta.sigma2(m);
        let dm = module.len() as f64;
        let mut sq = 0.0;
        for i in module.range() {
            let diff = theta[i] - meta.phi[i];
            sq += diff * diff;
            grad_theta[i] = diff / sigma2;
        }
        nll += 0.5 * dm * (2.0 * std::f64::consts::PI * sigma2).ln() + sq / (2.0 * sigma2);
        grad_log_sigma2[m] = 0.5 * dm - sq / (2.0 * sigma2);
    }
    let grad_phi = grad_theta.iter().map(|g| -g).collect();
    Ok(PriorTerms {
        nll,
        grad_theta,
        grad_phi,
        grad_log_sigma2,
    })
}

/// Weak sparsity penalty on the module variances.
///
/// Negative inverse-Gamma log density with shape 1 and scale `beta`, up to
/// constants: `Σ_m 2·log σ²_m + β/σ²_m`. The gradient is returned in
/// `log σ²` coordinates, `2 − β/σ²_m`. Its minimum sits at `σ²_m = β/2`.
pub fn ig_regularizer(meta: &MetaParams, beta: f64) -> Result<(f64, Vec<f64>)> {
    if !(beta >= 0.0) {
        return Err(Error::Contract(format!("beta must be >= 0, got {beta}")));
    }
    let mut penalty = 0.0;
    let grad = meta
        .log_sigma2
        .iter()
        .map(|&l| {
            let inv = (-l).exp();
            penalty += (IG_SHAPE + 1.0) * l + beta * inv;
            (IG_SHAPE + 1.0) - beta * inv
        })
        .collect();
    Ok((penalty, grad))
}
