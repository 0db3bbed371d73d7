use num_dual::{Dual64, DualNum};
use rand::Rng;

use super::{check_inputs, TaskModel};
use crate::data::Batch;
use crate::error::{check_len, Error, Result};
use crate::params::ModulePartition;

/// Scalar-input regression MLP `1 → H → H → 1` with ReLU activations and
/// mean-squared-error loss.
///
/// Parameters are flattened in module order `w0, b0, w1, b1, w2, b2`;
/// `w1` is stored row-major as `[out][in]`.
#[derive(Debug, Clone)]
pub struct SinusoidMlp {
    hidden: usize,
}

impl Default for SinusoidMlp {
    fn default() -> Self {
        Self { hidden: 40 }
    }
}

struct Offsets {
    w0: usize,
    b0: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    end: usize,
}

impl SinusoidMlp {
    pub fn new(hidden: usize) -> Self {
        assert!(hidden >= 1);
        Self { hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn offsets(&self) -> Offsets {
        let h = self.hidden;
        let w0 = 0;
        let b0 = w0 + h;
        let w1 = b0 + h;
        let b1 = w1 + h * h;
        let w2 = b1 + h;
        let b2 = w2 + h;
        Offsets {
            w0,
            b0,
            w1,
            b1,
            w2,
            b2,
            end: b2 + 1,
        }
    }

    /// Uniform `±√(1/fan_in)` initialization for weights and biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let h = self.hidden;
        let o = self.offsets();
        let mut theta = vec![0.0; o.end];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            for t in &mut theta[range] {
                *t = rng.random_range(-bound..bound);
            }
        };
        fill(o.w0..o.b0, 1);
        fill(o.b0..o.w1, 1);
        fill(o.w1..o.b1, h);
        fill(o.b1..o.w2, h);
        fill(o.w2..o.b2, h);
        fill(o.b2..o.end, h);
        theta
    }

    pub fn predict(&self, theta: &[f64], x: f64) -> f64 {
        let h = self.hidden;
        let o = self.offsets();
        let h1: Vec<f64> = (0..h)
            .map(|j| (theta[o.w0 + j] * x + theta[o.b0 + j]).max(0.0))
            .collect();
        let mut out = theta[o.b2];
        for k in 0..h {
            let row = &theta[o.w1 + k * h..o.w1 + (k + 1) * h];
            let z: f64 = theta[o.b1 + k] + row.iter().zip(&h1).map(|(w, a)| w * a).sum::<f64>();
            out += theta[o.w2 + k] * z.max(0.0);
        }
        out
    }

    fn split(batch: &Batch) -> Result<(Vec<f64>, &[f64])> {
        if batch.y.len() != batch.len() {
            return Err(Error::Contract("regression batch needs one target per input".into()));
        }
        let xs = batch
            .x
            .iter()
            .map(|row| {
                check_len("input", 1, row.len())?;
                Ok(row[0])
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((xs, &batch.y))
    }

    /// Mean squared error and (optionally) its gradient, generic over the
    /// scalar so that a dual-number pass yields exact Hessian-vector products.
    fn run<D: DualNum<Primitive = f64> + Copy>(
        &self,
        theta: &[D],
        xs: &[f64],
        ys: &[f64],
        with_grad: bool,
    ) -> (D, Vec<D>) {
        let h = self.hidden;
        let o = self.offsets();
        let zero = D::from(0.0);
        let n = xs.len() as f64;
        let mut grad = if with_grad { vec![zero; o.end] } else { Vec::new() };
        let mut loss = zero;

        let mut z1 = vec![zero; h];
        let mut a1 = vec![zero; h];
        let mut z2 = vec![zero; h];
        let mut a2 = vec![zero; h];
        let mut dz2 = vec![zero; h];
        let mut dz1 = vec![zero; h];

        for (&x, &y) in xs.iter().zip(ys) {
            for j in 0..h {
                z1[j] = theta[o.w0 + j] * x + theta[o.b0 + j];
                a1[j] = if z1[j].re() > 0.0 { z1[j] } else { zero };
            }
            let mut out = theta[o.b2];
            for k in 0..h {
                let row = &theta[o.w1 + k * h..o.w1 + (k + 1) * h];
                let mut acc = theta[o.b1 + k];
                for (w, a) in row.iter().zip(&a1) {
                    acc += *w * *a;
                }
                z2[k] = acc;
                a2[k] = if acc.re() > 0.0 { acc } else { zero };
                out += theta[o.w2 + k] * a2[k];
            }
            let resid = out - y;
            loss += resid * resid / n;
            if !with_grad {
                continue;
            }

            let dout = resid * (2.0 / n);
            grad[o.b2] += dout;
            for k in 0..h {
                grad[o.w2 + k] += dout * a2[k];
                dz2[k] = if z2[k].re() > 0.0 {
                    dout * theta[o.w2 + k]
                } else {
                    zero
                };
                grad[o.b1 + k] += dz2[k];
            }
            dz1.fill(zero);
            for k in 0..h {
                let d = dz2[k];
                let base = o.w1 + k * h;
                for j in 0..h {
                    grad[base + j] += d * a1[j];
                    dz1[j] += d * theta[base + j];
                }
            }
            for j in 0..h {
                let d = if z1[j].re() > 0.0 { dz1[j] } else { zero };
                grad[o.w0 + j] += d * x;
                grad[o.b0 + j] += d;
            }
        }
        (loss, grad)
    }
}

impl TaskModel for SinusoidMlp {
    fn name(&self) -> &str {
        "sinusoid-mlp"
    }

    fn dim(&self) -> usize {
        self.offsets().end
    }

    /// Six modules: `w0, b0, w1, b1, w2, b2`.
    fn default_partition(&self) -> ModulePartition {
        let h = self.hidden;
        ModulePartition::from_sizes(&[
            ("w0", h),
            ("b0", h),
            ("w1", h * h),
            ("b1", h),
            ("w2", h),
            ("b2", 1),
        ])
        .expect("valid sizes")
    }

    fn loss(&self, theta: &[f64], batch: &Batch) -> Result<f64> {
        check_inputs(self, theta, batch)?;
        let (xs, ys) = Self::split(batch)?;
        Ok(self.run(theta, &xs, ys, false).0)
    }

    fn grad(&self, theta: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(theta, batch)?.1)
    }

    fn loss_and_grad(&self, theta: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        check_inputs(self, theta, batch)?;
        let (xs, ys) = Self::split(batch)?;
        Ok(self.run(theta, &xs, ys, true))
    }

    /// Exact forward-over-reverse product; ReLU has zero curvature and
    /// subgradient 0 at the kink.
    fn hvp(&self, theta: &[f64], batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        check_inputs(self, theta, batch)?;
        check_len("v", self.dim(), v.len())?;
        let (xs, ys) = Self::split(batch)?;
        let dual: Vec<Dual64> = theta
            .iter()
            .zip(v)
            .map(|(&t, &d)| Dual64::new(t, d))
            .collect();
        let (_, g) = self.run(&dual, &xs, ys, true);
        Ok(g.iter().map(|d| d.eps).collect())
    }
}
