use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::*;
use crate::adapt::{adapt, InnerConfig};
use crate::data::{Batch, TaskData};
use crate::error::Result;
use crate::metagrad::sigma_imaml;
use crate::models::{GaussianObsModel, TaskModel as _};
use crate::params::MetaParams;
use crate::solver::CgConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Approximate relative standard error of the σ² root, dominated by its
/// denominator `mean((x̄ − ȳ)(x̄ − φ))` whose expectation is `1/N`.
fn sigma2_root_rel_se(sigma2: f64, n: usize, k: usize, t: usize) -> f64 {
    let (n, k) = (n as f64, k as f64);
    n * ((1.0 / n + 1.0 / k) * (sigma2 + 1.0 / n) / t as f64).sqrt()
}

/// Raw univariate tasks with `θ_t ~ N(φ_r, σ²_r)` and unit observation noise.
fn raw_tasks(rng: &mut ChaCha8Rng, phi_r: f64, sigma2_r: f64, n: usize, k: usize, t: usize) -> Vec<TaskData> {
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    (0..t)
        .map(|_| {
            let theta = phi_r + sigma2_r.sqrt() * z.sample(rng);
            let mut draw = |count: usize| {
                Batch::unlabelled((0..count).map(|_| vec![theta + z.sample(rng)]).collect())
            };
            let train = draw(n);
            TaskData::new(train, draw(k))
        })
        .collect()
}

/// Largest relative error between the σ-iMAML pipeline's σ² gradient and
/// the closed form over `points` random configurations.
pub fn pipeline_vs_closed_form(points: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = GaussianObsModel::identity(1, 1.0)?;
    let partition = model.default_partition();
    let cg = CgConfig {
        max_iters: 10,
        tol: 1e-14,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let n = rng.random_range(1..=10);
        let k = rng.random_range(1..=10);
        let t = rng.random_range(1..=8);
        let phi = rng.random_range(-2.0..2.0);
        let sigma2 = 10f64.powf(rng.random_range(-1.0..1.0));
        let phi_r = rng.random_range(-1.0..1.0);
        let tasks = raw_tasks(&mut rng, phi_r, 1.5, n, k, t);
        let meta = MetaParams::from_sigma2(vec![phi], &[sigma2]);
        // α = 1/N lands on the exact minimizer of this quadratic
        let inner = InnerConfig::gd(1.0 / n as f64, 5);
        let mut pipeline = 0.0;
        for task in &tasks {
            let a = adapt(&model, &task.train, &meta, &partition, &inner)?;
            pipeline += sigma_imaml(&model, task, &meta, &partition, &a, &cg)?.d_log_sigma2[0] / sigma2;
        }
        let stats = NormalTaskStats::from_tasks(&tasks)?;
        let closed = oracle_sigma2_pll_grad(&stats, phi, sigma2)?;
        let err = (pipeline - closed).abs() / closed.abs().max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs every closed-form invariant and reports one row per check.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    let worst = pipeline_vs_closed_form(20, seed)?;
    out.push(CheckResult::new(
        "implicit-pipeline-matches-closed-form",
        worst <= 1e-6,
        format!("max rel err {worst:.2e} over 20 points"),
    ));

    let stats = NormalTaskStats::simulate(0.3, 1.2, 5, 5, 300, seed ^ 0x5eed)?;
    let phi = 0.25;
    let root = oracle_sigma2_root(&stats, phi)?;
    let g = oracle_sigma2_pll_grad(&stats, phi, root)?;
    out.push(CheckResult::new(
        "pll-gradient-vanishes-at-root",
        g.abs() <= 1e-10,
        format!("gradient {g:.2e} at sigma2 {root:.4}"),
    ));

    for sigma2_r in [0.5, 2.0, 8.0] {
        let stats = NormalTaskStats::simulate(1.0, sigma2_r, 5, 5, 20_000, seed.wrapping_add(sigma2_r.to_bits()))?;
        let (phi_hat, s2_hat) = oracle_map_pll_estimates(&stats)?;
        let (e_phi, e_s2) = (rel(phi_hat, 1.0), rel(s2_hat, sigma2_r));
        let tol = 4.0 * sigma2_root_rel_se(sigma2_r, 5, 5, 20_000);
        out.push(CheckResult::new(
            &format!("consistency-sigma2-{sigma2_r}"),
            e_phi <= 0.05 && e_s2 <= tol,
            format!("phi {phi_hat:.4} (rel {e_phi:.3}), sigma2 {s2_hat:.4} (rel {e_s2:.3}, tol {tol:.3})"),
        ));
    }

    let cfg = DescentConfig::default();
    let stats = NormalTaskStats::simulate(0.0, 6.0, 1, 1, 2_000, seed ^ 0xbeef)?;
    if let JointSigma2::Roots { local_min, local_max } = oracle_joint_map_sigma2(&stats) {
        let above = joint_sigma2_descent(&stats, 2.0 * local_min, &cfg)?.sigma2;
        let between = joint_sigma2_descent(&stats, 0.5 * (local_min + local_max), &cfg)?.sigma2;
        let inside = joint_sigma2_descent(&stats, 0.5 * local_max, &cfg)?.sigma2;
        out.push(CheckResult::new(
            "joint-descent-basins",
            rel(above, local_min) <= 1e-4 && rel(between, local_min) <= 1e-4 && inside < 1e-6,
            format!("root {local_min:.5}: from above {above:.5}, between {between:.5}, inside {inside:.1e}"),
        ));
    } else {
        out.push(CheckResult::new("joint-descent-basins", false, "no roots sampled".into()));
    }
    let small = NormalTaskStats::simulate(0.0, 0.1, 2, 2, 2_000, seed ^ 0xf00d)?;
    let collapsed = joint_sigma2_descent(&small, 5.0, &cfg)?.sigma2;
    out.push(CheckResult::new(
        "joint-descent-collapses-when-s-small",
        small.s() < 2.0 && collapsed < 1e-6,
        format!("S {:.4}, final sigma2 {collapsed:.1e}", small.s()),
    ));

    let big = NormalTaskStats::simulate(0.0, 8.0, 1, 1, 1_000_000, seed ^ 0xc0ffee)?;
    let s = big.s();
    let limit = large_t_root_limit(8.0, 1);
    let root = match joint_sigma2_roots(s, 1) {
        JointSigma2::Roots { local_min, .. } => local_min,
        JointSigma2::DivergesToZero => f64::NAN,
    };
    out.push(CheckResult::new(
        "large-t-limits",
        rel(s, 9.0) <= 0.01 && rel(root, limit) <= 0.02,
        format!("S {s:.4} (limit 9), root {root:.4} (limit {limit:.4})"),
    ));

    let stats = NormalTaskStats::simulate(0.0, 1.0, 3, 3, 50, seed ^ 0xabc)?;
    let theta = vec![0.1; stats.tasks()];
    let vals: Vec<f64> = (1..=8)
        .map(|e| ell_joint(&stats, &theta, 0.1, 10f64.powi(-e)))
        .collect::<Result<_>>()?;
    out.push(CheckResult::new(
        "joint-objective-unbounded-below",
        vals.windows(2).all(|w| w[1] < w[0]),
        format!("{:.2} at 1e-1 to {:.2} at 1e-8", vals[0], vals[7]),
    ));

    Ok(out)
}
