//! Seeded task generators.
//!
//! Every task draws from its own ChaCha8 stream: the generator is seeded
//! with the run seed and its stream is set to the task index, so task `t`
//! is identical no matter how many tasks are generated or in which order.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, TaskData};
use crate::error::{Error, Result};
use crate::models::{GaussianObsConfig, GaussianObsModel, ObsTransform};

/// Generator for task `index` under `seed`.
pub fn task_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Hierarchical normal tasks: `θ_t ~ N(φ_r, diag(σ_r²))`,
/// `x ~ N(μ(θ_t), diag(ξ²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierNormalSpec {
    pub phi_r: Vec<f64>,
    /// Prior standard deviation per parameter.
    pub sigma_r: Vec<f64>,
    /// Observation standard deviation per output dimension.
    pub xi: Vec<f64>,
    pub transform: ObsTransform,
    pub n_train: usize,
    pub n_val: usize,
    pub tasks: usize,
}

impl HierNormalSpec {
    /// Linear transform `μ(θ) = [I; 1ᵀ/√M] θ` with two groups of prior
    /// scales.
    pub fn experiment1(n_train: usize, n_val: usize, tasks: usize) -> Self {
        Self {
            phi_r: vec![1.0; 8],
            sigma_r: vec![8.0, 8.0, 8.0, 8.0, 2.0, 2.0, 2.0, 2.0],
            xi: vec![8.0, 8.0, 8.0, 8.0, 5.0, 5.0, 5.0, 5.0, 1.0],
            transform: ObsTransform::SumAugmented,
            n_train,
            n_val,
            tasks,
        }
    }

    /// Swirl transform with `ω = π/5`.
    pub fn experiment2(n_train: usize, n_val: usize, tasks: usize) -> Self {
        let mut sigma_r = vec![4.0; 8];
        sigma_r.extend([8.0, 8.0]);
        Self {
            phi_r: vec![2.0; 10],
            sigma_r,
            xi: vec![10.0; 10],
            transform: ObsTransform::Swirl { omega: PI / 5.0 },
            n_train,
            n_val,
            tasks,
        }
    }

    /// Univariate normal with unit observation noise.
    pub fn univariate(phi_r: f64, sigma2_r: f64, n_train: usize, n_val: usize, tasks: usize) -> Self {
        Self {
            phi_r: vec![phi_r],
            sigma_r: vec![sigma2_r.sqrt()],
            xi: vec![1.0],
            transform: ObsTransform::Identity,
            n_train,
            n_val,
            tasks,
        }
    }

    pub fn dim(&self) -> usize {
        self.phi_r.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_r.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "sigma_r",
                expected: self.dim(),
                found: self.sigma_r.len(),
            });
        }
        if self.sigma_r.iter().chain(&self.xi).any(|s| !(*s > 0.0)) {
            return Err(Error::Config("standard deviations must be positive".into()));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("splits must be non-empty".into()));
        }
        self.model().map(|_| ())
    }

    /// The matching task model (validates the transform and `ξ`).
    pub fn model(&self) -> Result<GaussianObsModel> {
        let config = GaussianObsConfig {
            transform: self.transform.clone(),
            xi2: self.xi.iter().map(|x| x * x).collect(),
        };
        GaussianObsModel::new(config, self.dim())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierNormalTasks {
    pub tasks: Vec<TaskData>,
    /// True task parameters.
    pub theta: Vec<Vec<f64>>,
}

pub fn gen_hier_normal_task(spec: &HierNormalSpec, model: &GaussianObsModel, seed: u64, index: u64) -> (TaskData, Vec<f64>) {
    let mut rng = task_rng(seed, index);
    let theta: Vec<f64> = spec
        .phi_r
        .iter()
        .zip(&spec.sigma_r)
        .map(|(p, s)| p + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mu = model.mean(&theta);
    let mut draw = |count: usize| {
        let rows = (0..count)
            .map(|_| {
                mu.iter()
                    .zip(&spec.xi)
                    .map(|(m, x)| m + x * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Batch::unlabelled(rows)
    };
    let train = draw(spec.n_train);
    let val = draw(spec.n_val);
    (TaskData::new(train, val), theta)
}

pub fn gen_hier_normal_tasks(spec: &HierNormalSpec, seed: u64) -> Result<HierNormalTasks> {
    spec.validate()?;
    let model = spec.model()?;
    let (tasks, theta) = (0..spec.tasks as u64)
        .into_par_iter()
        .map(|t| gen_hier_normal_task(spec, &model, seed, t))
        .unzip();
    Ok(HierNormalTasks { tasks, theta })
}

/// Sinusoid regression tasks `y = a sin(x − b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinusoidSpec {
    pub amplitude: (f64, f64),
    pub phase: (f64, f64),
    pub input: (f64, f64),
    pub n_train: usize,
    /// Fresh validation draws from the same function.
    pub n_val: usize,
}

impl Default for SinusoidSpec {
    fn default() -> Self {
        Self {
            amplitude: (0.1, 5.0),
            phase: (0.0, PI),
            input: (-5.0, 5.0),
            n_train: 10,
            n_val: 10,
        }
    }
}

impl SinusoidSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo < hi && lo.is_finite() && hi.is_finite();
        if !(ok(self.amplitude) && ok(self.phase) && ok(self.input)) {
            return Err(Error::Config("sinusoid ranges must be finite and non-empty".into()));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("splits must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidTasks {
    pub tasks: Vec<TaskData>,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
}

pub fn gen_sinusoid_task(spec: &SinusoidSpec, seed: u64, index: u64) -> (TaskData, f64, f64) {
    let mut rng = task_rng(seed, index);
    let a = rng.random_range(spec.amplitude.0..spec.amplitude.1);
    let b = rng.random_range(spec.phase.0..spec.phase.1);
    let mut draw = |count: usize| {
        let xs: Vec<f64> = (0..count)
            .map(|_| rng.random_range(spec.input.0..spec.input.1))
            .collect();
        let ys: Vec<f64> = xs.iter().map(|x| a * (x - b).sin()).collect();
        Batch::regression(&xs, &ys)
    };
    let train = draw(spec.n_train);
    let val = draw(spec.n_val);
    (TaskData::new(train, val), a, b)
}

pub fn gen_sinusoid_tasks(spec: &SinusoidSpec, count: usize, seed: u64) -> Result<SinusoidTasks> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("task count must be at least 1".into()));
    }
    let rows: Vec<(TaskData, f64, f64)> = (0..count as u64)
        .into_par_iter()
        .map(|t| gen_sinusoid_task(spec, seed, t))
        .collect();
    let mut out = SinusoidTasks {
        tasks: Vec::with_capacity(count),
        amplitudes: Vec::with_capacity(count),
        phases: Vec::with_capacity(count),
    };
    for (task, a, b) in rows {
        out.tasks.push(task);
        out.amplitudes.push(a);
        out.phases.push(b);
    }
    Ok(out)
}

/// Serializable description of a task distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskSpec {
    HierNormal(HierNormalSpec),
    Sinusoid {
        #[serde(flatten)]
        spec: SinusoidSpec,
        tasks: usize,
    },
}

impl TaskSpec {
    pub fn task_count(&self) -> usize {
        match self {
            TaskSpec::HierNormal(s) => s.tasks,
            TaskSpec::Sinusoid { tasks, .. } => *tasks,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<TaskData>> {
        match self {
            TaskSpec::HierNormal(s) => Ok(gen_hier_normal_tasks(s, seed)?.tasks),
            TaskSpec::Sinusoid { spec, tasks } => Ok(gen_sinusoid_tasks(spec, *tasks, seed)?.tasks),
        }
    }

    /// A single task by index, without generating the rest.
    pub fn task(&self, seed: u64, index: u64) -> Result<TaskData> {
        match self {
            TaskSpec::HierNormal(s) => {
                let model = s.model()?;
                Ok(gen_hier_normal_task(s, &model, seed, index).0)
            }
            TaskSpec::Sinusoid { spec, .. } => Ok(gen_sinusoid_task(spec, seed, index).0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tasks_to_json;
    use crate::models::TaskModel;

    #[test]
    fn degenerate_prior_pins_theta() {
        let mut spec = HierNormalSpec::experiment1(3, 3, 50);
        spec.sigma_r = vec![1e-9; 8];
        let out = gen_hier_normal_tasks(&spec, 1).unwrap();
        for th in &out.theta {
            assert!(th.iter().all(|t| (t - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn experiment1_variances() {
        let out = gen_hier_normal_tasks(&HierNormalSpec::experiment1(1, 1, 5000), 7).unwrap();
        for d in 0..8 {
            let col: Vec<f64> = out.theta.iter().map(|t| t[d]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            let target = if d < 4 { 64.0 } else { 4.0 };
            assert!((var - target).abs() <= 0.1 * target, "dim {d}: {var}");
        }
    }

    #[test]
    fn same_seed_same_bits_and_order_independent() {
        let spec = HierNormalSpec::experiment2(4, 4, 30);
        let a = gen_hier_normal_tasks(&spec, 99).unwrap();
        let b = gen_hier_normal_tasks(&spec, 99).unwrap();
        assert_eq!(tasks_to_json(&a.tasks).unwrap(), tasks_to_json(&b.tasks).unwrap());
        let model = spec.model().unwrap();
        let (t17, _) = gen_hier_normal_task(&spec, &model, 99, 17);
        assert_eq!(t17, a.tasks[17]);
        let c = gen_hier_normal_tasks(&spec, 100).unwrap();
        assert_ne!(a.tasks, c.tasks);
    }

    #[test]
    fn split_sizes_and_model_compatibility() {
        let spec = HierNormalSpec::experiment1(5, 3, 4);
        let model = spec.model().unwrap();
        let out = gen_hier_normal_tasks(&spec, 0).unwrap();
        for t in &out.tasks {
            assert_eq!((t.train.len(), t.val.len()), (5, 3));
            assert!(model.loss(&spec.phi_r, &t.train).unwrap().is_finite());
        }
        assert_eq!(model.dim(), 8);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = HierNormalSpec::experiment1(5, 5, 4);
        spec.sigma_r[0] = 0.0;
        assert!(gen_hier_normal_tasks(&spec, 0).is_err());
        let s = SinusoidSpec {
            n_train: 0,
            ..Default::default()
        };
        assert!(gen_sinusoid_tasks(&s, 3, 0).is_err());
        assert!(gen_sinusoid_tasks(&SinusoidSpec::default(), 0, 0).is_err());
    }

    #[test]
    fn sinusoid_ranges() {
        let out = gen_sinusoid_tasks(&SinusoidSpec::default(), 10_000, 3).unwrap();
        for (t, (a, b)) in out.tasks.iter().zip(out.amplitudes.iter().zip(&out.phases)) {
            assert!((0.1..5.0).contains(a));
            assert!((0.0..PI).contains(b));
            assert_eq!((t.train.len(), t.val.len()), (10, 10));
            for (x, y) in t.train.x.iter().zip(&t.train.y) {
                assert!((-5.0..5.0).contains(&x[0]));
                assert!(y.abs() <= a + 1e-12);
            }
        }
        let min = out.amplitudes.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min < 0.2);
    }

    #[test]
    fn sinusoid_uniform_ks() {
        let out = gen_sinusoid_tasks(&SinusoidSpec::default(), 10_000, 11).unwrap();
        let ks = |mut v: Vec<f64>, lo: f64, hi: f64| {
            v.sort_by(f64::total_cmp);
            let n = v.len() as f64;
            v.iter()
                .enumerate()
                .map(|(i, x)| {
                    let f = (x - lo) / (hi - lo);
                    (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
                })
                .fold(0.0, f64::max)
        };
        // critical value at p = 0.01 is 1.628/√n
        let crit = 1.628 / 100.0;
        assert!(ks(out.amplitudes.clone(), 0.1, 5.0) < crit);
        assert!(ks(out.phases.clone(), 0.0, PI) < crit);
        let xs: Vec<f64> = out.tasks.iter().take(1000).flat_map(|t| t.train.x.iter().map(|r| r[0])).collect();
        assert!(ks(xs, -5.0, 5.0) < crit);
    }

    #[test]
    fn sinusoid_determinism() {
        let spec = SinusoidSpec::default();
        let a = gen_sinusoid_tasks(&spec, 50, 5).unwrap();
        let b = gen_sinusoid_tasks(&spec, 50, 5).unwrap();
        assert_eq!(a, b);
        let ts = TaskSpec::Sinusoid { spec, tasks: 50 };
        assert_eq!(ts.task(5, 20).unwrap(), a.tasks[20]);
    }

    #[test]
    fn task_spec_json_round_trip() {
        let spec = TaskSpec::HierNormal(HierNormalSpec::experiment2(5, 5, 100));
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"kind\":\"hier-normal\""));
        let back: TaskSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let sin = TaskSpec::Sinusoid { spec: SinusoidSpec::default(), tasks: 3 };
        let back: TaskSpec = serde_json::from_str(&serde_json::to_string(&sin).unwrap()).unwrap();
        assert_eq!(back, sin);
    }
}
