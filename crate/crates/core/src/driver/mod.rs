//! Meta-training loop, experiment configuration and run persistence.

mod io;
mod train;

pub use io::{read_checkpoint, read_run, write_run, MetaParamsFile, RunFiles};
pub use train::{
    meta_test, meta_train, meta_train_with, Checkpoint, MetaOptState, RunRecord, StepDiagnostics, StepMetrics,
    TestTrajectory, TrainOptions,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::InnerConfig;
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::metagrad::DEFAULT_UNROLL_BUDGET;
use crate::models::{SinusoidMlp, TaskModel};
use crate::optim::{InnerOptimizer, Schedule};
use crate::params::ModulePartition;
use crate::solver::CgConfig;
use crate::taskgen::{task_rng, TaskSpec};

/// Stream salt for held-out task generation.
const HELD_OUT_SALT: u64 = 0x4845_4c44_4f55_5400;
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    SigmaImaml,
    SigmaReptile,
    SigmaMaml,
    Imaml,
    Reptile,
    Maml,
    MetaSgd,
}

impl Algorithm {
    pub fn learns_sigma2(self) -> bool {
        matches!(self, Algorithm::SigmaImaml | Algorithm::SigmaReptile | Algorithm::SigmaMaml)
    }

    pub fn is_unrolled(self) -> bool {
        matches!(self, Algorithm::SigmaMaml | Algorithm::Maml | Algorithm::MetaSgd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SigmaImaml => "sigma-imaml",
            Algorithm::SigmaReptile => "sigma-reptile",
            Algorithm::SigmaMaml => "sigma-maml",
            Algorithm::Imaml => "imaml",
            Algorithm::Reptile => "reptile",
            Algorithm::Maml => "maml",
            Algorithm::MetaSgd => "meta-sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MetaOptimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain SGD; with `scale_by_sigma2` the `φ` rate of module `m` is
    /// multiplied by `σ²_m`.
    Sgd {
        #[serde(default)]
        scale_by_sigma2: bool,
    },
}

impl Default for MetaOptimizer {
    fn default() -> Self {
        MetaOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    #[serde(default)]
    pub optimizer: MetaOptimizer,
    pub lr_phi: f64,
    #[serde(default)]
    pub lr_log_sigma2: f64,
    /// Meta-SGD learning-rate step size.
    #[serde(default)]
    pub lr_alpha: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub init_log_sigma2: f64,
    /// Decay of the meta learning rates over the run.
    #[serde(default)]
    pub lr_schedule: Schedule,
}

fn default_hidden() -> usize {
    40
}

fn default_true() -> bool {
    true
}

fn default_imaml_lambda() -> f64 {
    1.0
}

fn default_budget() -> usize {
    DEFAULT_UNROLL_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    /// Task distribution. Its task count is the training pool size; a
    /// count of 0 draws fresh tasks at every meta step.
    pub tasks: TaskSpec,
    #[serde(default = "default_hidden")]
    pub mlp_hidden: usize,
    /// Initial `φ`; zeros for Gaussian tasks and a seeded uniform
    /// initialization for the MLP when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_phi: Option<Vec<f64>>,
    pub meta: MetaConfig,
    pub inner: InnerConfig,
    #[serde(default)]
    pub cg: CgConfig,
    /// Apply the `max(σ⁻²/10³, 1)` preconditioner in σ-engines.
    #[serde(default = "default_true")]
    pub precondition: bool,
    /// Inverse-Gamma scale; 0 disables the regularizer.
    #[serde(default)]
    pub beta: f64,
    /// Weight of the regularizer in the meta objective; defaults to `beta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ig_weight: Option<f64>,
    /// Shrinkage strength for iMAML.
    #[serde(default = "default_imaml_lambda")]
    pub imaml_lambda: f64,
    /// Initial per-module inner learning rate for Meta-SGD; defaults to
    /// `inner.step_size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metasgd_init_lr: Option<f64>,
    /// σ-Reptile and Reptile adapt on train ∪ val for the `φ` update.
    #[serde(default = "default_true")]
    pub reptile_full_data: bool,
    #[serde(default = "default_budget")]
    pub unroll_budget: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn ig_weight(&self) -> f64 {
        self.ig_weight.unwrap_or(self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        let m = &self.meta;
        for (name, v) in [
            ("lr_phi", m.lr_phi),
            ("lr_log_sigma2", m.lr_log_sigma2),
            ("lr_alpha", m.lr_alpha),
            ("beta", self.beta),
            ("ig_weight", self.ig_weight()),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !m.init_log_sigma2.is_finite() {
            return bad("init_log_sigma2 must be finite");
        }
        if m.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.inner.step_size > 0.0) {
            return bad("inner step_size must be positive");
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be at least 1");
        }
        if self.algorithm == Algorithm::Imaml && !(self.imaml_lambda > 0.0) {
            return bad("imaml_lambda must be positive");
        }
        if self.algorithm.is_unrolled() {
            if self.inner.steps > self.unroll_budget {
                return Err(Error::UnrollBudget {
                    steps: self.inner.steps,
                    budget: self.unroll_budget,
                });
            }
            if !matches!(self.inner.optimizer, InnerOptimizer::Gd) {
                return Err(Error::Unsupported(format!(
                    "{} requires the proximal GD inner optimizer",
                    self.algorithm.name()
                )));
            }
        }
        self.cg.validate()?;
        match &self.tasks {
            TaskSpec::HierNormal(s) => s.validate()?,
            TaskSpec::Sinusoid { spec, .. } => spec.validate()?,
        }
        let (_, partition) = self.build_model()?;
        if let Some(phi) = &self.init_phi {
            if phi.len() != partition.dim() {
                return Err(Error::DimensionMismatch {
                    what: "init_phi",
                    expected: partition.dim(),
                    found: phi.len(),
                });
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<(Box<dyn TaskModel>, ModulePartition)> {
        let model: Box<dyn TaskModel> = match &self.tasks {
            TaskSpec::HierNormal(s) => Box::new(s.model()?),
            TaskSpec::Sinusoid { .. } => Box::new(SinusoidMlp::new(self.mlp_hidden)),
        };
        let partition = model.default_partition();
        Ok((model, partition))
    }

    pub fn initial_phi(&self, dim: usize) -> Vec<f64> {
        if let Some(phi) = &self.init_phi {
            return phi.clone();
        }
        match &self.tasks {
            TaskSpec::HierNormal(_) => vec![0.0; dim],
            TaskSpec::Sinusoid { .. } => {
                let mut rng: ChaCha8Rng = task_rng(self.seed, INIT_STREAM);
                SinusoidMlp::new(self.mlp_hidden).init_params(&mut rng)
            }
        }
    }

    /// Tasks disjoint from the training pool, for meta-testing.
    pub fn held_out_tasks(&self, count: usize) -> Result<Vec<TaskData>> {
        let seed = self.seed ^ HELD_OUT_SALT;
        (0..count as u64).map(|i| self.tasks.task(seed, i)).collect()
    }
}
