//! Preconditioned conjugate gradients for damped Hessian systems.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::params::{MetaParams, ModulePartition};
use crate::vector::{axpy, dot, norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Relative residual target `‖Ax − b‖/‖b‖`.
    pub tol: f64,
    /// Added to the operator as `d̃ I`.
    pub damping: f64,
    /// Per-coordinate diagonal `P`; the solver applies `P⁻¹`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preconditioner: Option<Vec<f64>>,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iters: 5,
            tol: 1e-10,
            damping: 0.0,
            preconditioner: None,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("cg max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("cg tol must be positive".into()));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::Config("cg damping must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    /// Relative residual of the returned iterate.
    pub residual: f64,
    pub iters: usize,
}

/// Solves `(A + d̃I) x = b` from `x₀ = 0`. Returns the best iterate seen
/// when the budget runs out before `tol` is reached.
pub fn cg_solve<F>(apply_a: F, b: &[f64], cfg: &CgConfig) -> Result<CgOutcome>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let n = b.len();
    if let Some(p) = &cfg.preconditioner {
        check_len("preconditioner", n, p.len())?;
        if p.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain("preconditioner entries must be positive".into()));
        }
    }
    let b_norm = norm(b);
    if !b_norm.is_finite() {
        return Err(Error::NonFinite("cg right-hand side"));
    }
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x: vec![0.0; n],
            residual: 0.0,
            iters: 0,
        });
    }
    let precondition = |r: &[f64]| -> Vec<f64> {
        match &cfg.preconditioner {
            Some(p) => r.iter().zip(p).map(|(ri, pi)| ri / pi).collect(),
            None => r.to_vec(),
        }
    };
    let apply = |v: &[f64]| -> Result<Vec<f64>> {
        let mut out = apply_a(v)?;
        check_len("operator output", n, out.len())?;
        if cfg.damping != 0.0 {
            axpy(cfg.damping, v, &mut out);
        }
        Ok(out)
    };

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut best = (x.clone(), 1.0);

    for k in 0..cfg.max_iters {
        let ap = apply(&p)?;
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) {
            return Err(Error::Indefinite {
                iteration: k,
                curvature,
            });
        }
        let alpha = rz / curvature;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rel = norm(&r) / b_norm;
        if !rel.is_finite() {
            return Err(Error::Indefinite {
                iteration: k,
                curvature: f64::NAN,
            });
        }
        if rel < best.1 {
            best = (x.clone(), rel);
        }
        if rel <= cfg.tol {
            return Ok(CgOutcome {
                x,
                residual: rel,
                iters: k + 1,
            });
        }
        z = precondition(&r);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Ok(CgOutcome {
        x: best.0,
        residual: best.1,
        iters: cfg.max_iters,
    })
}

/// Diagonal preconditioner `p_m = max(σ_m⁻²/10³, 1)` broadcast to
/// coordinates.
pub fn module_preconditioner(meta: &MetaParams, partition: &ModulePartition) -> Vec<f64> {
    let per_module: Vec<f64> = meta
        .sigma2_vec()
        .iter()
        .map(|s2| (1.0 / s2 / 1e3).max(1.0))
        .collect();
    partition.broadcast(&per_module)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(a: &DMatrix<f64>) -> impl Fn(&[f64]) -> Result<Vec<f64>> + '_ {
        move |v| Ok((a * DVector::from_column_slice(v)).as_slice().to_vec())
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        b.transpose() * &b + DMatrix::identity(n, n)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm(&diff) / norm(b)
    }

    #[test]
    fn identity_in_one_iteration() {
        let b = [1.0, -2.0, 3.0];
        let out = cg_solve(|v| Ok(v.to_vec()), &b, &CgConfig::default()).unwrap();
        assert_eq!(out.iters, 1);
        assert_eq!(out.x, b.to_vec());
    }

    #[test]
    fn diagonal_example() {
        let cfg = CgConfig {
            max_iters: 10,
            ..Default::default()
        };
        let out = cg_solve(|v| Ok(vec![2.0 * v[0], 4.0 * v[1]]), &[2.0, 4.0], &cfg).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-12 && (out.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rhs() {
        let out = cg_solve(|v| Ok(v.to_vec()), &[0.0, 0.0], &CgConfig::default()).unwrap();
        assert_eq!(out.x, vec![0.0, 0.0]);
        assert_eq!(out.iters, 0);
    }

    #[test]
    fn random_spd_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(20, &mut rng);
        let b: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = CgConfig {
            max_iters: 200,
            tol: 1e-13,
            ..Default::default()
        };
        let out = cg_solve(dense(&a), &b, &cfg).unwrap();
        let exact = a.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        assert!(rel_err(&out.x, exact.as_slice()) <= 1e-8);
    }

    #[test]
    fn damping_is_applied() {
        let cfg = CgConfig {
            max_iters: 5,
            damping: 1.0,
            ..Default::default()
        };
        let out = cg_solve(|v| Ok(v.to_vec()), &[4.0], &cfg).unwrap();
        assert!((out.x[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn undamped_residual_grows_with_damping() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(12, &mut rng);
        let b: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = -1.0;
        for d in [0.0, 1e-3, 1e-1] {
            let cfg = CgConfig {
                max_iters: 200,
                tol: 1e-14,
                damping: d,
                preconditioner: None,
            };
            let x = cg_solve(dense(&a), &b, &cfg).unwrap().x;
            let r = &a * DVector::from_column_slice(&x) - DVector::from_column_slice(&b);
            let res = r.norm();
            assert!(res > last);
            last = res;
        }
    }

    #[test]
    fn negative_curvature_detected() {
        let err = cg_solve(|v| Ok(vec![-v[0]]), &[1.0], &CgConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Indefinite { iteration: 0, .. }));
    }

    #[test]
    fn non_finite_operator_detected() {
        let err = cg_solve(|_| Ok(vec![f64::NAN]), &[1.0], &CgConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Indefinite { .. }));
    }

    #[test]
    fn budget_exhaustion_reports_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_spd(30, &mut rng);
        let b: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = CgConfig {
            max_iters: 2,
            ..Default::default()
        };
        let out = cg_solve(dense(&a), &b, &cfg).unwrap();
        assert_eq!(out.iters, 2);
        let r = &a * DVector::from_column_slice(&out.x) - DVector::from_column_slice(&b);
        assert!((r.norm() / norm(&b) - out.residual).abs() < 1e-10);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = CgConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(cg_solve(|v| Ok(v.to_vec()), &[1.0], &cfg).is_err());
    }

    #[test]
    fn preconditioner_values() {
        let p = ModulePartition::from_sizes(&[("a", 1), ("b", 2), ("c", 1)]).unwrap();
        let meta = MetaParams::from_sigma2(vec![0.0; 4], &[1.0, 1e-5, 1e5]);
        let pre = module_preconditioner(&meta, &p);
        assert_eq!(pre[0], 1.0);
        assert!((pre[1] - 100.0).abs() < 1e-9 && (pre[2] - 100.0).abs() < 1e-9);
        assert_eq!(pre[3], 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn small_systems_converge_and_preconditioning_is_neutral(seed in 0u64..10_000, n in 1usize..=32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(n, &mut rng);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let diag: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..100.0)).collect();
            let plain_cfg = CgConfig { max_iters: 4 * n, tol: 1e-10, ..Default::default() };
            let pre_cfg = CgConfig { preconditioner: Some(diag), ..plain_cfg.clone() };
            let plain = cg_solve(dense(&a), &b, &plain_cfg).unwrap();
            let pre = cg_solve(dense(&a), &b, &pre_cfg).unwrap();
            prop_assert!(plain.residual <= 1e-10);
            prop_assert!(rel_err(&pre.x, &plain.x) <= 1e-6);
        }
    }
}
