use std::time::Instant;

use log::{debug, info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Algorithm, ExperimentConfig, MetaOptimizer};
use crate::adapt::{adapt, adapt_with, AdaptOptions};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::metagrad::{
    imaml, maml, metasgd, reptile, sigma_imaml, sigma_maml, sigma_reptile, MetaGradient,
};
use crate::models::TaskModel;
use crate::optim::{adam_step, AdamState};
use crate::params::{clip_sigma2, ig_regularizer, MetaParams, ModulePartition};
use crate::solver::{module_preconditioner, CgConfig};
use crate::taskgen::task_rng;
use crate::vector::{all_finite, norm};

/// Stream salt for the per-step task sampler.
const SAMPLER_SALT: u64 = 0x5341_4d50_4c45_5200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub mean_cg_iters: f64,
    pub max_cg_residual: f64,
    pub max_train_grad_norm: f64,
    pub non_stationary_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_train_loss: f64,
    pub mean_val_loss: f64,
    /// σ² after the update.
    pub sigma2: Vec<f64>,
    pub grad_norm_phi: f64,
    pub grad_norm_log_sigma2: f64,
    pub diagnostics: StepDiagnostics,
    /// Seconds spent on this step; excluded from `metrics.csv`.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaOptState {
    pub phi: AdamState,
    pub log_sigma2: AdamState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AdamState>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Meta steps completed.
    pub step: usize,
    pub meta: MetaParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    pub opt: MetaOptState,
    pub metrics: Vec<StepMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub partition: ModulePartition,
    pub seed: u64,
    pub metrics: Vec<StepMetrics>,
    pub meta: MetaParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Worker threads; `SHRINKMETA_THREADS` or the rayon default otherwise.
    pub threads: Option<usize>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many total steps (for checkpointing mid-run).
    pub stop_after: Option<usize>,
}

struct TaskOutcome {
    grad: MetaGradient,
    d_alpha: Option<Vec<f64>>,
    train_loss: f64,
    val_loss: f64,
}

/// Runs the configured meta-training loop from scratch.
pub fn meta_train(config: &ExperimentConfig) -> Result<RunRecord> {
    meta_train_with(config, TrainOptions::default())
}

pub fn meta_train_with(config: &ExperimentConfig, opts: TrainOptions) -> Result<RunRecord> {
    config.validate()?;
    let threads = opts.threads.or_else(|| {
        std::env::var("SHRINKMETA_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|n: &usize| *n > 0)
    });
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| run(config, opts))
        }
        None => run(config, opts),
    }
}

fn initial_checkpoint(config: &ExperimentConfig, partition: &ModulePartition) -> Checkpoint {
    let dim = partition.dim();
    let modules = partition.len();
    let meta = clip_sigma2(&MetaParams::new(
        config.initial_phi(dim),
        vec![config.meta.init_log_sigma2; modules],
    ));
    let adam = |n: usize| match config.meta.optimizer {
        MetaOptimizer::Adam { beta1, beta2, eps } => AdamState::with_params(n, beta1, beta2, eps),
        MetaOptimizer::Sgd { .. } => AdamState::new(n),
    };
    let alphas = (config.algorithm == Algorithm::MetaSgd)
        .then(|| vec![config.metasgd_init_lr.unwrap_or(config.inner.step_size); modules]);
    Checkpoint {
        step: 0,
        meta,
        opt: MetaOptState {
            phi: adam(dim),
            log_sigma2: adam(modules),
            alpha: alphas.as_ref().map(|a| adam(a.len())),
        },
        alphas,
        metrics: Vec::new(),
    }
}

fn sample_batch(
    config: &ExperimentConfig,
    pool: &Option<Vec<TaskData>>,
    step: usize,
) -> Result<Vec<TaskData>> {
    let b = config.meta.batch_size;
    match pool {
        Some(pool) => {
            let mut rng = task_rng(config.seed ^ SAMPLER_SALT, step as u64);
            Ok((0..b)
                .map(|_| pool[rng.random_range(0..pool.len())].clone())
                .collect())
        }
        None => (0..b)
            .map(|i| config.tasks.task(config.seed, (step * b + i) as u64))
            .collect(),
    }
}

fn task_meta_gradient(
    config: &ExperimentConfig,
    model: &dyn TaskModel,
    partition: &ModulePartition,
    state: &Checkpoint,
    cg: &CgConfig,
    task: &TaskData,
) -> Result<TaskOutcome> {
    let meta = &state.meta;
    let inner = &config.inner;
    let budget = config.unroll_budget;
    let val_at = |theta: &[f64]| model.loss(theta, &task.val);
    let (grad, d_alpha, train_loss, val_loss) = match config.algorithm {
        Algorithm::SigmaImaml => {
            let a = adapt(model, &task.train, meta, partition, inner)?;
            let g = sigma_imaml(model, task, meta, partition, &a, cg)?;
            let (tl, vl) = (g.diagnostics.train_loss, g.diagnostics.val_loss);
            (g, None, tl, vl)
        }
        Algorithm::SigmaReptile => {
            let a = adapt(model, &task.train, meta, partition, inner)?;
            let full_theta = if config.reptile_full_data {
                adapt(model, &task.full(), meta, partition, inner)?.theta_hat
            } else {
                a.theta_hat.clone()
            };
            let g = sigma_reptile(model, task, meta, partition, &a, &full_theta, cg)?;
            let (tl, vl) = (g.diagnostics.train_loss, g.diagnostics.val_loss);
            (g, None, tl, vl)
        }
        Algorithm::SigmaMaml => {
            let g = sigma_maml(model, task, meta, partition, inner, budget)?;
            let (tl, vl) = (g.diagnostics.train_loss, g.diagnostics.val_loss);
            (g, None, tl, vl)
        }
        Algorithm::Imaml => {
            let lambda = vec![config.imaml_lambda; partition.len()];
            let a = adapt_with(model, &task.train, &meta.phi, &lambda, partition, inner, AdaptOptions::default())?;
            let g = imaml(model, task, config.imaml_lambda, partition, &a, cg)?;
            let (tl, vl) = (g.diagnostics.train_loss, g.diagnostics.val_loss);
            (g, None, tl, vl)
        }
        Algorithm::Reptile => {
            let zero = vec![0.0; partition.len()];
            let data = if config.reptile_full_data { task.full() } else { task.train.clone() };
            let a = adapt_with(model, &data, &meta.phi, &zero, partition, inner, AdaptOptions::default())?;
            let g = reptile(&meta.phi, partition, &a)?;
            let tl = model.loss(&a.theta_hat, &task.train)?;
            let vl = val_at(&a.theta_hat)?;
            (g, None, tl, vl)
        }
        Algorithm::Maml => {
            let g = maml(model, task, &meta.phi, partition, inner, budget)?;
            let (tl, vl) = (g.diagnostics.train_loss, g.diagnostics.val_loss);
            (g, None, tl, vl)
        }
        Algorithm::MetaSgd => {
            let alphas = state.alphas.as_deref().ok_or_else(|| {
                Error::Contract("meta-sgd state is missing learning rates".into())
            })?;
            let s = metasgd(model, task, &meta.phi, alphas, partition, inner.steps, budget)?;
            let (tl, vl) = (s.grad.diagnostics.train_loss, s.grad.diagnostics.val_loss);
            (s.grad, Some(s.d_alpha), tl, vl)
        }
    };
    if !grad.is_finite() || !d_alpha.as_deref().is_none_or(all_finite) {
        return Err(Error::NonFinite("meta-gradient"));
    }
    Ok(TaskOutcome {
        grad,
        d_alpha,
        train_loss,
        val_loss,
    })
}

fn mean_into(acc: &mut [f64], v: &[f64], scale: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x * scale;
    }
}

fn apply_update(
    config: &ExperimentConfig,
    partition: &ModulePartition,
    state: &mut Checkpoint,
    d_phi: &[f64],
    d_log_sigma2: &[f64],
    d_alpha: Option<&[f64]>,
    lr_factor: f64,
) {
    let m = &config.meta;
    let (lr_phi, lr_ls, lr_a) = (m.lr_phi * lr_factor, m.lr_log_sigma2 * lr_factor, m.lr_alpha * lr_factor);
    let learns_sigma = config.algorithm.learns_sigma2() && m.lr_log_sigma2 > 0.0;
    match m.optimizer {
        MetaOptimizer::Adam { .. } => {
            state.meta.phi = adam_step(&state.meta.phi, d_phi, &mut state.opt.phi, lr_phi).0;
            if learns_sigma {
                state.meta.log_sigma2 =
                    adam_step(&state.meta.log_sigma2, d_log_sigma2, &mut state.opt.log_sigma2, lr_ls).0;
            }
            if let (Some(alphas), Some(d), Some(st)) = (state.alphas.as_mut(), d_alpha, state.opt.alpha.as_mut()) {
                *alphas = adam_step(alphas, d, st, lr_a).0;
            }
        }
        MetaOptimizer::Sgd { scale_by_sigma2 } => {
            let scale = if scale_by_sigma2 {
                partition.broadcast(&state.meta.sigma2_vec())
            } else {
                vec![1.0; d_phi.len()]
            };
            for ((p, g), s) in state.meta.phi.iter_mut().zip(d_phi).zip(&scale) {
                *p -= lr_phi * s * g;
            }
            if learns_sigma {
                for (l, g) in state.meta.log_sigma2.iter_mut().zip(d_log_sigma2) {
                    *l -= lr_ls * g;
                }
            }
            if let (Some(alphas), Some(d)) = (state.alphas.as_mut(), d_alpha) {
                for (a, g) in alphas.iter_mut().zip(d) {
                    *a -= lr_a * g;
                }
            }
        }
    }
    state.meta = clip_sigma2(&state.meta);
}

fn run(config: &ExperimentConfig, opts: TrainOptions) -> Result<RunRecord> {
    let (model, partition) = config.build_model()?;
    let model = model.as_ref();
    let pool = match config.tasks.task_count() {
        0 => None,
        _ => Some(config.tasks.generate(config.seed)?),
    };
    let mut state = match opts.resume {
        Some(ck) => {
            ck.meta.check(&partition)?;
            ck
        }
        None => initial_checkpoint(config, &partition),
    };
    let total = config.meta.steps;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let ig_weight = config.ig_weight();
    let modules = partition.len();
    let mut warned_stationarity = false;

    while state.step < stop {
        let step = state.step;
        let started = Instant::now();
        let tasks = sample_batch(config, &pool, step)?;
        let mut cg = config.cg.clone();
        if config.precondition && config.algorithm.learns_sigma2() {
            cg.preconditioner = Some(module_preconditioner(&state.meta, &partition));
        }
        let outcomes: Vec<Result<TaskOutcome>> = tasks
            .par_iter()
            .map(|task| task_meta_gradient(config, model, &partition, &state, &cg, task))
            .collect();

        let scale = 1.0 / tasks.len() as f64;
        let mut d_phi = vec![0.0; partition.dim()];
        let mut d_ls = vec![0.0; modules];
        let mut d_alpha = state.alphas.as_ref().map(|a| vec![0.0; a.len()]);
        let (mut train_loss, mut val_loss) = (0.0, 0.0);
        let mut diag = StepDiagnostics {
            mean_cg_iters: 0.0,
            max_cg_residual: 0.0,
            max_train_grad_norm: 0.0,
            non_stationary_tasks: 0,
        };
        for outcome in outcomes {
            let o = outcome.map_err(|e| Error::MetaStep {
                step,
                source: Box::new(e),
            })?;
            mean_into(&mut d_phi, &o.grad.d_phi, scale);
            mean_into(&mut d_ls, &o.grad.d_log_sigma2, scale);
            if let (Some(acc), Some(d)) = (d_alpha.as_mut(), o.d_alpha.as_ref()) {
                mean_into(acc, d, scale);
            }
            train_loss += o.train_loss * scale;
            val_loss += o.val_loss * scale;
            let dg = &o.grad.diagnostics;
            diag.mean_cg_iters += dg.cg_iters as f64 * scale;
            diag.max_cg_residual = diag.max_cg_residual.max(dg.cg_residual);
            diag.max_train_grad_norm = diag.max_train_grad_norm.max(dg.train_grad_norm);
            diag.non_stationary_tasks += usize::from(dg.non_stationary);
        }
        if diag.non_stationary_tasks > 0 && !warned_stationarity {
            warned_stationarity = true;
            warn!(
                "step {step}: {} task(s) not adapted to stationarity (max train gradient norm {:.3e}); \
                 implicit gradients are approximate, see diagnostics.jsonl",
                diag.non_stationary_tasks, diag.max_train_grad_norm
            );
        }
        if config.algorithm.learns_sigma2() && ig_weight > 0.0 {
            let (_, g) = ig_regularizer(&state.meta, config.beta)?;
            mean_into(&mut d_ls, &g, ig_weight);
        }

        let last_good = state.clone();
        let lr_factor = config.meta.lr_schedule.factor(step, total);
        apply_update(config, &partition, &mut state, &d_phi, &d_ls, d_alpha.as_deref(), lr_factor);
        let alphas_ok = state.alphas.as_deref().is_none_or(all_finite);
        if !state.meta.is_finite() || !alphas_ok {
            return Err(Error::NonFiniteMeta {
                step,
                last_good: Box::new(last_good),
            });
        }
        let metrics = StepMetrics {
            step,
            mean_train_loss: train_loss,
            mean_val_loss: val_loss,
            sigma2: state.meta.sigma2_vec(),
            grad_norm_phi: norm(&d_phi),
            grad_norm_log_sigma2: norm(&d_ls),
            diagnostics: diag,
            wall_time: started.elapsed().as_secs_f64(),
        };
        if step % 100 == 0 || step + 1 == total {
            info!(
                "step {step}: train {:.5} val {:.5} sigma2 {:?}",
                metrics.mean_train_loss, metrics.mean_val_loss, metrics.sigma2
            );
        } else {
            debug!("step {step}: val {:.5}", metrics.mean_val_loss);
        }
        state.metrics.push(metrics);
        state.step += 1;
    }

    Ok(RunRecord {
        config: config.clone(),
        partition,
        seed: config.seed,
        metrics: state.metrics.clone(),
        meta: state.meta.clone(),
        alphas: state.alphas.clone(),
        checkpoint: state,
    })
}

/// Validation-loss trajectory of one held-out task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestTrajectory {
    /// Entry `k` is the loss after `k` adaptation steps.
    pub val_loss: Vec<f64>,
}

impl TestTrajectory {
    pub fn final_loss(&self) -> f64 {
        *self.val_loss.last().expect("trajectory has the initial point")
    }
}

/// Adapts each held-out task for `steps` steps from the learned
/// initialization and records the validation loss after every step.
/// Shrinkage follows the algorithm: learned σ² for σ-engines, the fixed
/// `λ` for iMAML, none otherwise; Meta-SGD uses its learned rates.
pub fn meta_test(
    config: &ExperimentConfig,
    meta: &MetaParams,
    alphas: Option<&[f64]>,
    tasks: &[TaskData],
    steps: usize,
) -> Result<Vec<TestTrajectory>> {
    if !meta.is_finite() {
        return Err(Error::NonFinite("meta parameters"));
    }
    let (model, partition) = config.build_model()?;
    meta.check(&partition)?;
    let model = model.as_ref();
    let inner = config.inner.with_steps(steps);
    let lambda = match config.algorithm {
        a if a.learns_sigma2() => meta.precisions(),
        Algorithm::Imaml => vec![config.imaml_lambda; partition.len()],
        _ => vec![0.0; partition.len()],
    };
    tasks
        .par_iter()
        .map(|task| {
            if config.algorithm == Algorithm::MetaSgd {
                let alphas = alphas.ok_or_else(|| Error::Contract("meta-sgd needs learned rates".into()))?;
                return metasgd_trajectory(model, &partition, &meta.phi, alphas, task, steps);
            }
            let opts = AdaptOptions {
                val: Some(&task.val),
                ..Default::default()
            };
            let a = adapt_with(model, &task.train, &meta.phi, &lambda, &partition, &inner, opts)?;
            Ok(TestTrajectory {
                val_loss: a.val_trajectory(),
            })
        })
        .collect()
}

fn metasgd_trajectory(
    model: &dyn TaskModel,
    partition: &ModulePartition,
    phi: &[f64],
    alphas: &[f64],
    task: &TaskData,
    steps: usize,
) -> Result<TestTrajectory> {
    let rates = partition.broadcast(alphas);
    let mut theta = phi.to_vec();
    let mut val_loss = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        val_loss.push(model.loss(&theta, &task.val)?);
        let g = model.grad(&theta, &task.train)?;
        for ((t, gi), a) in theta.iter_mut().zip(&g).zip(&rates) {
            *t -= a * gi;
        }
    }
    val_loss.push(model.loss(&theta, &task.val)?);
    Ok(TestTrajectory { val_loss })
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_config;
    use super::*;

    #[test]
    fn zero_steps_leave_meta_unchanged() {
        let mut cfg = small_config(Algorithm::SigmaImaml);
        cfg.meta.steps = 0;
        let rec = meta_train(&cfg).unwrap();
        assert!(rec.metrics.is_empty());
        assert_eq!(rec.meta.phi, vec![0.0]);
        assert_eq!(rec.meta.log_sigma2, vec![0.0]);
    }

    #[test]
    fn every_algorithm_runs() {
        for alg in [
            Algorithm::SigmaImaml,
            Algorithm::SigmaReptile,
            Algorithm::SigmaMaml,
            Algorithm::Imaml,
            Algorithm::Reptile,
            Algorithm::Maml,
            Algorithm::MetaSgd,
        ] {
            let mut cfg = small_config(alg);
            cfg.inner.steps = 5;
            let rec = meta_train(&cfg).unwrap();
            assert_eq!(rec.metrics.len(), 20, "{alg:?}");
            assert!(rec.meta.is_finite());
            assert_ne!(rec.meta.phi, vec![0.0], "{alg:?}");
            if !alg.learns_sigma2() {
                assert_eq!(rec.meta.log_sigma2, vec![0.0]);
            }
            assert_eq!(rec.alphas.is_some(), alg == Algorithm::MetaSgd);
            let held = cfg.held_out_tasks(3).unwrap();
            let traj = meta_test(&cfg, &rec.meta, rec.alphas.as_deref(), &held, 7).unwrap();
            assert!(traj.iter().all(|t| t.val_loss.len() == 8));
        }
    }

    #[test]
    fn identical_runs_are_identical() {
        let cfg = small_config(Algorithm::SigmaReptile);
        let a = meta_train(&cfg).unwrap();
        let b = meta_train_with(&cfg, TrainOptions { threads: Some(2), ..Default::default() }).unwrap();
        let strip = |r: &RunRecord| {
            r.metrics
                .iter()
                .map(|m| (m.mean_train_loss, m.mean_val_loss, m.sigma2.clone(), m.grad_norm_phi))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.meta, b.meta);
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let cfg = small_config(Algorithm::SigmaImaml);
        let full = meta_train(&cfg).unwrap();
        let half = meta_train_with(&cfg, TrainOptions { stop_after: Some(8), ..Default::default() }).unwrap();
        assert_eq!(half.metrics.len(), 8);
        let json = serde_json::to_string(&half.checkpoint).unwrap();
        let ck: Checkpoint = serde_json::from_str(&json).unwrap();
        let resumed = meta_train_with(&cfg, TrainOptions { resume: Some(ck), ..Default::default() }).unwrap();
        assert_eq!(resumed.meta, full.meta);
        for (a, b) in resumed.metrics.iter().zip(&full.metrics) {
            assert_eq!((a.step, a.mean_val_loss, &a.sigma2), (b.step, b.mean_val_loss, &b.sigma2));
        }
    }

    #[test]
    fn meta_test_zero_steps_is_evaluation_of_phi() {
        let cfg = small_config(Algorithm::SigmaImaml);
        let meta = MetaParams::from_sigma2(vec![0.7], &[1.5]);
        let held = cfg.held_out_tasks(4).unwrap();
        let (model, _) = cfg.build_model().unwrap();
        let traj = meta_test(&cfg, &meta, None, &held, 0).unwrap();
        for (t, task) in traj.iter().zip(&held) {
            assert_eq!(t.val_loss, vec![model.loss(&meta.phi, &task.val).unwrap()]);
        }
    }

    #[test]
    fn engine_errors_carry_step() {
        let mut cfg = small_config(Algorithm::SigmaImaml);
        cfg.inner.step_size = 50.0;
        cfg.inner.steps = 600;
        let err = meta_train(&cfg).unwrap_err();
        assert!(matches!(err, Error::MetaStep { step: 0, .. }), "{err}");
    }
}
