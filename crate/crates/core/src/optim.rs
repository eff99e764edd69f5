//! Quasi-Newton (BFGS) minimization with a backtracking Armijo line search.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// A differentiable objective. Implementations may keep state between
/// calls (warm starts), hence `&mut self`.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> Result<f64>;
    fn value_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    /// Convergence threshold on the sup-norm of the gradient.
    pub gtol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Maximum sup-norm of a single step.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            gtol: 1e-6,
            max_iter: 500,
            armijo: 1e-4,
            max_step: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Converged,
    MaxIterations,
    /// No step along the search direction decreased the objective.
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub status: Status,
}

impl BfgsResult {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }
}

pub(crate) fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` from `x0`.
pub fn minimize<F: Objective>(f: &mut F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f.value_grad(&x)?;
    // inverse Hessian approximation, row-major
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    let mut scaled = false;
    let mut status = Status::MaxIterations;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter;
        if sup_norm(&g) <= opts.gtol {
            status = Status::Converged;
            break;
        }
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&d, &g);
        if slope >= 0.0 {
            // lost positive definiteness: restart from steepest descent
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
            scaled = false;
            d = g.iter().map(|v| -v).collect();
            slope = dot(&d, &g);
        }
        let dmax = sup_norm(&d);
        let mut step = if dmax > opts.max_step {
            opts.max_step / dmax
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            // a trial point where the objective cannot be evaluated is
            // treated as infinitely bad
            let ft = match f.value(&trial) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if ft.is_finite() && ft <= fx + opts.armijo * step * slope {
                accepted = Some(trial);
                break;
            }
            step *= 0.5;
        }
        let Some(x_new) = accepted else {
            status = Status::LineSearchFailed;
            break;
        };
        let (f_new, g_new) = f.value_grad(&x_new)?;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if !scaled {
                let gamma = sy / dot(&y, &y);
                for v in h.iter_mut() {
                    *v *= gamma;
                }
                scaled = true;
            }
            // H <- (I - r s y^T) H (I - r y s^T) + r s s^T
            let r = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] +=
                        (1.0 + r * yhy) * r * s[i] * s[j] - r * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        iterations = iter + 1;
    }
    if status == Status::MaxIterations && sup_norm(&g) <= opts.gtol {
        status = Status::Converged;
    }
    Ok(BfgsResult {
        grad_norm: sup_norm(&g),
        x,
        value: fx,
        grad: g,
        iterations,
        status,
    })
}
