//! Closed forms for the univariate hierarchical normal model
//! `θ_t ~ N(φ, σ²)`, `x_{t,n}, y_{t,k} ~ N(θ_t, 1)`, written on the
//! sufficient statistics `x̄_t`, `ȳ_t`.

mod suite;

pub use suite::{run_suite, CheckResult};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TaskData;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalTaskStats {
    /// Per-task train means.
    pub xbar: Vec<f64>,
    /// Per-task validation means.
    pub ybar: Vec<f64>,
    pub n: usize,
    pub k: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("sigma2 must be positive, got {sigma2}")))
    }
}

impl NormalTaskStats {
    pub fn new(xbar: Vec<f64>, ybar: Vec<f64>, n: usize, k: usize) -> Result<Self> {
        if xbar.is_empty() {
            return Err(Error::DegenerateData("no tasks".into()));
        }
        if xbar.len() != ybar.len() {
            return Err(Error::DimensionMismatch {
                what: "ybar",
                expected: xbar.len(),
                found: ybar.len(),
            });
        }
        if n == 0 || k == 0 {
            return Err(Error::DegenerateData("empty train or validation split".into()));
        }
        Ok(Self { xbar, ybar, n, k })
    }

    /// Statistics of one-dimensional tasks with equal split sizes.
    pub fn from_tasks(tasks: &[TaskData]) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::DegenerateData("no tasks".into()))?;
        let (n, k) = (first.train.len(), first.val.len());
        let mut xbar = Vec::with_capacity(tasks.len());
        let mut ybar = Vec::with_capacity(tasks.len());
        for t in tasks {
            if t.train.len() != n || t.val.len() != k {
                return Err(Error::Contract("tasks must share split sizes".into()));
            }
            let avg = |rows: &[Vec<f64>]| -> Result<f64> {
                let mut s = 0.0;
                for r in rows {
                    if r.len() != 1 {
                        return Err(Error::DimensionMismatch {
                            what: "observation",
                            expected: 1,
                            found: r.len(),
                        });
                    }
                    s += r[0];
                }
                Ok(s / rows.len() as f64)
            };
            xbar.push(avg(&t.train.x)?);
            ybar.push(avg(&t.val.x)?);
        }
        Self::new(xbar, ybar, n, k)
    }

    /// Draws the sufficient statistics directly:
    /// `x̄_t ~ N(θ_t, 1/N)`, `ȳ_t ~ N(θ_t, 1/K)`.
    pub fn simulate(phi_r: f64, sigma2_r: f64, n: usize, k: usize, tasks: usize, seed: u64) -> Result<Self> {
        check_sigma2(sigma2_r)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let (sn, sk, sr) = ((1.0 / n as f64).sqrt(), (1.0 / k as f64).sqrt(), sigma2_r.sqrt());
        let mut xbar = Vec::with_capacity(tasks);
        let mut ybar = Vec::with_capacity(tasks);
        for _ in 0..tasks {
            let theta = phi_r + sr * std.sample(&mut rng);
            xbar.push(theta + sn * std.sample(&mut rng));
            ybar.push(theta + sk * std.sample(&mut rng));
        }
        Self::new(xbar, ybar, n, k)
    }

    pub fn tasks(&self) -> usize {
        self.xbar.len()
    }

    pub fn xbar_mean(&self) -> f64 {
        mean(&self.xbar)
    }

    pub fn ybar_mean(&self) -> f64 {
        mean(&self.ybar)
    }

    /// Across-task (biased) sample variance of `x̄_t`.
    pub fn s(&self) -> f64 {
        let m = self.xbar_mean();
        self.xbar.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / self.tasks() as f64
    }
}

/// MAP task parameter `(x̄ + φ/(Nσ²)) / (1 + 1/(Nσ²))`.
pub fn oracle_theta_hat(xbar: f64, phi: f64, n: usize, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    let r = 1.0 / (n as f64 * sigma2);
    Ok((xbar + phi * r) / (1.0 + r))
}

/// `∇_{σ²} ℓ̂_PLL` summed over tasks.
pub fn oracle_sigma2_pll_grad(stats: &NormalTaskStats, phi: f64, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    let n = stats.n as f64;
    let r = 1.0 / (n * sigma2);
    let factor = stats.k as f64 / (n * sigma2 * sigma2 * (1.0 + r).powi(3));
    let sum: f64 = stats
        .xbar
        .iter()
        .zip(&stats.ybar)
        .map(|(x, y)| (x - y + r * (phi - y)) * (x - phi))
        .sum();
    Ok(factor * sum)
}

/// Root in σ² of the PLL gradient at fixed `φ`.
pub fn oracle_sigma2_root(stats: &NormalTaskStats, phi: f64) -> Result<f64> {
    let t = stats.tasks() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in stats.xbar.iter().zip(&stats.ybar) {
        num += (x - phi) * (y - phi);
        den += (x - y) * (x - phi);
    }
    let den = stats.n as f64 * den / t;
    if den == 0.0 {
        return Err(Error::DegenerateData(
            "train and validation means coincide; sigma2 root undefined".into(),
        ));
    }
    Ok(num / t / den)
}

/// Root in φ of the PLL gradient at fixed σ²: `ȳ + Nσ²(ȳ − x̄)`.
pub fn oracle_phi_root(xbar_mean: f64, ybar_mean: f64, n: usize, sigma2: f64) -> f64 {
    ybar_mean + n as f64 * sigma2 * (ybar_mean - xbar_mean)
}

/// Joint PLL estimate of `φ` with σ² eliminated.
pub fn oracle_phi_pll(stats: &NormalTaskStats) -> Result<f64> {
    let t = stats.tasks() as f64;
    let (xm, ym) = (stats.xbar_mean(), stats.ybar_mean());
    let (mut a, mut b) = (0.0, 0.0);
    for (x, y) in stats.xbar.iter().zip(&stats.ybar) {
        a += x * (x - y);
        b += x * y;
    }
    let (a, b) = (a / t, b / t);
    let den = xm * (ym - xm) + a;
    if den == 0.0 {
        return Err(Error::DegenerateData("phi estimate undefined".into()));
    }
    Ok((a * ym + b * (ym - xm)) / den)
}

/// `(φ̂, σ̂²)` with both estimated from the predictive likelihood.
pub fn oracle_pll_estimates(stats: &NormalTaskStats) -> Result<(f64, f64)> {
    let phi = oracle_phi_pll(stats)?;
    Ok((phi, oracle_sigma2_root(stats, phi)?))
}

/// Joint-MAP estimate of `φ`, the same `x̄` for every σ².
pub fn oracle_phi_map(stats: &NormalTaskStats) -> f64 {
    stats.xbar_mean()
}

/// `(φ̂, σ̂²)` with `φ` from the joint MAP and σ² from the predictive
/// likelihood.
pub fn oracle_map_pll_estimates(stats: &NormalTaskStats) -> Result<(f64, f64)> {
    let phi = oracle_phi_map(stats);
    Ok((phi, oracle_sigma2_root(stats, phi)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum JointSigma2 {
    DivergesToZero,
    /// `local_max` bounds the basin that collapses to zero.
    Roots { local_min: f64, local_max: f64 },
}

/// Stationary points of the profiled joint objective in σ²:
/// `σ⁴ + (2/N − S)σ² + 1/N² = 0`.
pub fn joint_sigma2_roots(s: f64, n: usize) -> JointSigma2 {
    let n = n as f64;
    if s < 4.0 / n {
        return JointSigma2::DivergesToZero;
    }
    let disc = (s * (s - 4.0 / n)).sqrt();
    JointSigma2::Roots {
        local_min: 0.5 * (s - 2.0 / n + disc),
        local_max: 0.5 * (s - 2.0 / n - disc),
    }
}

pub fn oracle_joint_map_sigma2(stats: &NormalTaskStats) -> JointSigma2 {
    joint_sigma2_roots(stats.s(), stats.n)
}

/// Large-`T` limit of the local-min root: `S → σ²_r + 1/N`.
pub fn large_t_root_limit(sigma2_r: f64, n: usize) -> f64 {
    let n = n as f64;
    0.5 * (sigma2_r - 1.0 / n + ((sigma2_r + 1.0 / n) * (sigma2_r - 3.0 / n)).sqrt())
}

/// Negative joint log density, dropping `Σ(x − x̄_t)²/2` and `2π` terms:
/// `T/2 log σ² + Σ(θ_t − φ)²/(2σ²) + N/2 Σ(x̄_t − θ_t)²`.
pub fn ell_joint(stats: &NormalTaskStats, theta: &[f64], phi: f64, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    if theta.len() != stats.tasks() {
        return Err(Error::DimensionMismatch {
            what: "theta",
            expected: stats.tasks(),
            found: theta.len(),
        });
    }
    let n = stats.n as f64;
    let mut out = 0.5 * stats.tasks() as f64 * sigma2.ln();
    for (th, x) in theta.iter().zip(&stats.xbar) {
        out += (th - phi).powi(2) / (2.0 * sigma2) + 0.5 * n * (x - th).powi(2);
    }
    Ok(out)
}

/// Conditional joint MAP `(θ̂_{1:T}, φ̂)` at fixed σ².
pub fn joint_map_given_sigma2(stats: &NormalTaskStats, sigma2: f64) -> Result<(Vec<f64>, f64)> {
    let phi = oracle_phi_map(stats);
    let theta = stats
        .xbar
        .iter()
        .map(|x| oracle_theta_hat(*x, phi, stats.n, sigma2))
        .collect::<Result<Vec<f64>>>()?;
    Ok((theta, phi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    /// Step size in `log σ²`.
    pub step_size: f64,
    pub max_iters: usize,
    /// Stop once `|Δ log σ²|` falls below this.
    pub tol: f64,
    /// Stop once σ² falls below this.
    pub floor: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            max_iters: 200_000,
            tol: 1e-13,
            floor: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentOutcome {
    pub sigma2: f64,
    pub iters: usize,
}

/// Gradient descent on `log σ²` of `ℓ_joint / T`, re-solving `θ` and `φ`
/// for their conditional MAP at every iterate. The gradient is the partial
/// derivative in σ² at those values.
pub fn joint_sigma2_descent(stats: &NormalTaskStats, init_sigma2: f64, cfg: &DescentConfig) -> Result<DescentOutcome> {
    check_sigma2(init_sigma2)?;
    let t = stats.tasks() as f64;
    let mut log_s2 = init_sigma2.ln();
    for iter in 0..cfg.max_iters {
        let s2 = log_s2.exp();
        if s2 < cfg.floor {
            return Ok(DescentOutcome { sigma2: s2, iters: iter });
        }
        let (theta, phi) = joint_map_given_sigma2(stats, s2)?;
        let ss: f64 = theta.iter().map(|th| (th - phi).powi(2)).sum();
        // σ² ∂/∂σ² of (T/2 log σ² + ss/(2σ²)), per task
        let g = 0.5 - ss / (2.0 * s2 * t);
        let step = cfg.step_size * g;
        log_s2 -= step;
        if step.abs() < cfg.tol {
            return Ok(DescentOutcome {
                sigma2: log_s2.exp(),
                iters: iter + 1,
            });
        }
    }
    Ok(DescentOutcome {
        sigma2: log_s2.exp(),
        iters: cfg.max_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(x: &[f64], y: &[f64], n: usize, k: usize) -> NormalTaskStats {
        NormalTaskStats::new(x.to_vec(), y.to_vec(), n, k).unwrap()
    }

    #[test]
    fn theta_hat_examples() {
        assert!((oracle_theta_hat(2.0, 0.0, 4, 1.0).unwrap() - 1.6).abs() < 1e-15);
        assert!((oracle_theta_hat(2.0, 0.0, 4, 1e12).unwrap() - 2.0).abs() < 1e-10);
        assert!((oracle_theta_hat(2.0, 0.5, 4, 1e-12).unwrap() - 0.5).abs() < 1e-10);
        assert!(oracle_theta_hat(2.0, 0.0, 4, 0.0).is_err());
    }

    #[test]
    fn pll_grad_examples() {
        let s = stats(&[1.0, 1.0], &[1.0, 1.0], 3, 2);
        assert_eq!(oracle_sigma2_pll_grad(&s, 1.0, 0.7).unwrap(), 0.0);
        let s = stats(&[2.0], &[1.0], 1, 1);
        assert_eq!(oracle_sigma2_pll_grad(&s, 0.0, 1.0).unwrap(), 0.0);
        assert!(oracle_sigma2_pll_grad(&s, 0.0, -1.0).is_err());
    }

    #[test]
    fn pll_grad_matches_finite_difference_of_validation_loss() {
        // ℓ̂_PLL = Σ_t K/2 (ȳ_t − θ̂_t)² + const
        let s = stats(&[0.3, 2.0, -1.0], &[0.9, 1.2, -0.4], 4, 3);
        let phi = 0.2;
        let pll = |s2: f64| -> f64 {
            s.xbar
                .iter()
                .zip(&s.ybar)
                .map(|(x, y)| {
                    let th = oracle_theta_hat(*x, phi, s.n, s2).unwrap();
                    s.k as f64 / 2.0 * (y - th).powi(2)
                })
                .sum()
        };
        let s2 = 0.6;
        let h = 1e-6;
        let fd = (pll(s2 + h) - pll(s2 - h)) / (2.0 * h);
        let exact = oracle_sigma2_pll_grad(&s, phi, s2).unwrap();
        assert!((fd - exact).abs() <= 1e-7 * exact.abs());
    }

    #[test]
    fn sigma2_root_examples() {
        let s = stats(&[2.0], &[1.0], 1, 1);
        assert!((oracle_sigma2_root(&s, 0.0).unwrap() - 1.0).abs() < 1e-15);
        let s = stats(&[2.0, 3.0], &[2.0, 3.0], 1, 1);
        assert!(matches!(oracle_sigma2_root(&s, 0.0), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn gradient_vanishes_and_flips_at_root() {
        let s = NormalTaskStats::simulate(0.5, 1.5, 5, 5, 200, 4).unwrap();
        let phi = 0.4;
        let root = oracle_sigma2_root(&s, phi).unwrap();
        assert!(root > 0.0);
        assert!(oracle_sigma2_pll_grad(&s, phi, root).unwrap().abs() < 1e-10);
        let lo = oracle_sigma2_pll_grad(&s, phi, 0.8 * root).unwrap();
        let hi = oracle_sigma2_pll_grad(&s, phi, 1.25 * root).unwrap();
        assert!(lo * hi < 0.0);
    }

    #[test]
    fn phi_root_examples() {
        assert_eq!(oracle_phi_root(0.7, 0.7, 5, 3.0), 0.7);
        assert_eq!(oracle_phi_root(0.0, 1.0, 2, 0.5), 2.0);
        assert_eq!(oracle_phi_root(0.3, 1.0, 2, 0.0), 1.0);
    }

    #[test]
    fn combined_phi_solves_both_stationarity_conditions() {
        let s = NormalTaskStats::simulate(1.0, 2.0, 5, 5, 500, 9).unwrap();
        let (phi, s2) = oracle_pll_estimates(&s).unwrap();
        let back = oracle_phi_root(s.xbar_mean(), s.ybar_mean(), s.n, s2);
        assert!((back - phi).abs() < 1e-9 * phi.abs().max(1.0));
        assert!(oracle_sigma2_pll_grad(&s, phi, s2).unwrap().abs() < 1e-9);
    }

    #[test]
    fn phi_map_is_mean_and_minimizes_joint() {
        let s = stats(&[1.0, 2.0, 4.5], &[0.0, 0.0, 0.0], 2, 1);
        assert_eq!(oracle_phi_map(&s), 2.5);
        let single = stats(&[1.7], &[0.0], 2, 1);
        assert_eq!(oracle_phi_map(&single), 1.7);
        // coordinate-wise: φ minimizes ℓ_joint given conditional θ̂
        for s2 in [0.1, 1.0, 10.0] {
            let (theta, phi) = joint_map_given_sigma2(&s, s2).unwrap();
            let base = ell_joint(&s, &theta, phi, s2).unwrap();
            for d in [-1e-4, 1e-4] {
                let mut th = theta.clone();
                th[1] += d;
                assert!(ell_joint(&s, &theta, phi + d, s2).unwrap() > base);
                assert!(ell_joint(&s, &th, phi, s2).unwrap() > base);
            }
        }
    }

    #[test]
    fn joint_roots_examples() {
        match joint_sigma2_roots(4.0, 1) {
            JointSigma2::Roots { local_min, local_max } => {
                assert!((local_min - 1.0).abs() < 1e-15 && (local_max - 1.0).abs() < 1e-15)
            }
            _ => panic!("expected a double root"),
        }
        assert_eq!(joint_sigma2_roots(1.0, 2), JointSigma2::DivergesToZero);
        match joint_sigma2_roots(6.0, 1) {
            JointSigma2::Roots { local_min, local_max } => {
                assert!((local_min - (2.0 + 3f64.sqrt())).abs() < 1e-12);
                assert!((local_max - (2.0 - 3f64.sqrt())).abs() < 1e-12);
            }
            _ => panic!("expected roots"),
        }
    }

    #[test]
    fn ell_joint_at_prior_mean_decreases_without_bound() {
        let s = stats(&[0.5, 1.5, -0.2], &[0.0; 3], 3, 1);
        let phi = 0.4;
        let theta = vec![phi; 3];
        let vals: Vec<f64> = (1..=8)
            .map(|e| ell_joint(&s, &theta, phi, 10f64.powi(-e)).unwrap())
            .collect();
        for w in vals.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    proptest! {
        #[test]
        fn quadratic_roots_satisfy_equation(s in 0.0f64..50.0, n in 1usize..20) {
            if let JointSigma2::Roots { local_min, local_max } = joint_sigma2_roots(s, n) {
                let nf = n as f64;
                for r in [local_min, local_max] {
                    let q = r * r + (2.0 / nf - s) * r + 1.0 / (nf * nf);
                    prop_assert!(q.abs() <= 1e-9 * (1.0 + s * s));
                    prop_assert!(r > 0.0);
                }
                prop_assert!(local_min >= local_max);
            } else {
                prop_assert!(s < 4.0 / n as f64);
            }
        }

        #[test]
        fn theta_hat_between_mean_and_prior(x in -10.0f64..10.0, phi in -10.0f64..10.0, s2 in 1e-3f64..1e3, n in 1usize..50) {
            let th = oracle_theta_hat(x, phi, n, s2).unwrap();
            prop_assert!(th >= x.min(phi) - 1e-12 && th <= x.max(phi) + 1e-12);
        }
    }
}
