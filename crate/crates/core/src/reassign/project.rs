//! Exact Euclidean projection onto the reassignment polytope.
//!
//! The set is `{ p >= 0, sum_{t in k} p_tg = cap_k for every unit g and
//! block k, sum_g n_g sum_{t in c} p_tg = N_c for every conservation group
//! c }`. With a single block of capacity one the unit rows are plain
//! simplexes. Dualizing the population rows leaves one scaled-simplex
//! projection per unit and block; the multipliers solve a small concave
//! piecewise-quadratic problem by Newton's method with backtracking.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub(crate) struct Polytope {
    /// Unit sizes `n_g`.
    pub sizes: Vec<f64>,
    /// Conservation group of each (compact) type.
    pub group: Vec<usize>,
    /// Target population of each group.
    pub totals: Vec<f64>,
    /// Within-unit block of each type.
    pub block: Vec<usize>,
    /// Share each block must sum to inside every unit.
    pub caps: Vec<f64>,
}

/// Projection of `v` onto `{x >= 0, sum x = cap}`. Returns the threshold
/// so the active set is `{i : v_i > theta}`.
pub(crate) fn simplex_project(v: &[f64], cap: f64, out: &mut [f64]) -> f64 {
    if cap <= 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return f64::INFINITY;
    }
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - cap) / (i as f64 + 1.0);
        if ui - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - theta).max(0.0);
    }
    theta
}

impl Polytope {
    pub fn n_types(&self) -> usize {
        self.group.len()
    }

    pub fn n_groups(&self) -> usize {
        self.totals.len()
    }

    /// Type positions of each block.
    fn block_members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.caps.len()];
        for (j, &b) in self.block.iter().enumerate() {
            m[b].push(j);
        }
        m
    }

    /// Primal point for multipliers `mu`; also returns the dual value.
    fn primal(&self, y: &[f64], mu: &[f64], x: &mut [f64]) -> f64 {
        let t = self.n_types();
        let members = self.block_members();
        let mut shifted = Vec::with_capacity(t);
        let mut proj = vec![0.0; t];
        let mut dual = 0.0;
        for (g, &n) in self.sizes.iter().enumerate() {
            let yg = &y[g * t..(g + 1) * t];
            let xg = &mut x[g * t..(g + 1) * t];
            for (b, idx) in members.iter().enumerate() {
                shifted.clear();
                shifted.extend(idx.iter().map(|&j| yg[j] - n * mu[self.group[j]]));
                simplex_project(&shifted, self.caps[b], &mut proj[..idx.len()]);
                for (k, &j) in idx.iter().enumerate() {
                    xg[j] = proj[k];
                }
            }
            for j in 0..t {
                let d = xg[j] - yg[j];
                dual += 0.5 * d * d + n * mu[self.group[j]] * xg[j];
            }
        }
        dual - mu.iter().zip(&self.totals).map(|(m, c)| m * c).sum::<f64>()
    }

    fn dual_gradient(&self, x: &[f64]) -> Vec<f64> {
        let t = self.n_types();
        let mut grad: Vec<f64> = self.totals.iter().map(|c| -c).collect();
        for (g, &n) in self.sizes.iter().enumerate() {
            for j in 0..t {
                grad[self.group[j]] += n * x[g * t + j];
            }
        }
        grad
    }

    /// Minus the generalized Hessian of the dual at primal point `x`.
    fn curvature(&self, x: &[f64]) -> DMatrix<f64> {
        let t = self.n_types();
        let c = self.n_groups();
        let members = self.block_members();
        let mut m = DMatrix::zeros(c, c);
        let mut counts = vec![0.0; c];
        for (g, &n) in self.sizes.iter().enumerate() {
            let w = n * n;
            for idx in &members {
                counts.iter_mut().for_each(|v| *v = 0.0);
                let mut k = 0.0;
                for &j in idx {
                    if x[g * t + j] > 0.0 {
                        counts[self.group[j]] += 1.0;
                        k += 1.0;
                    }
                }
                if k == 0.0 {
                    continue;
                }
                for a in 0..c {
                    if counts[a] == 0.0 {
                        continue;
                    }
                    m[(a, a)] += w * counts[a];
                    for b in 0..c {
                        m[(a, b)] -= w * counts[a] * counts[b] / k;
                    }
                }
            }
        }
        m
    }

    /// Projects `y`, warm-starting and updating the multipliers `mu`.
    pub fn project(&self, y: &[f64], mu: &mut [f64]) -> Vec<f64> {
        let c = self.n_groups();
        let n_total: f64 = self.sizes.iter().sum();
        let tol = 1e-11 * n_total.max(1.0);
        let mut x = vec![0.0; y.len()];
        if c == 0 {
            self.primal(y, mu, &mut x);
            return x;
        }
        // warm multipliers can be far off when `y` is nearly feasible
        let zero = vec![0.0; c];
        let cold = self.primal(y, &zero, &mut x);
        if self.dual_gradient(&x).iter().all(|v| v.abs() <= tol) {
            mu.copy_from_slice(&zero);
            return x;
        }
        let mut dual = self.primal(y, mu, &mut x);
        if cold > dual {
            mu.copy_from_slice(&zero);
            dual = self.primal(y, mu, &mut x);
        }
        for _ in 0..200 {
            let grad = self.dual_gradient(&x);
            let gnorm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gnorm <= tol {
                break;
            }
            let mut m = self.curvature(&x);
            let scale = (0..c).map(|i| m[(i, i)]).sum::<f64>().max(1.0) / c as f64;
            for a in 0..c {
                m[(a, a)] += 1e-8 * scale;
                for b in 0..c {
                    // shifting every multiplier equally changes nothing
                    m[(a, b)] += scale / c as f64;
                }
            }
            let step = match m.cholesky() {
                Some(ch) => ch.solve(&DVector::from_vec(grad.clone())),
                None => DVector::from_vec(grad.iter().map(|g| g / scale).collect()),
            };
            let slope: f64 = step.iter().zip(&grad).map(|(s, g)| s * g).sum();
            let mut lam = 1.0;
            let mut trial_mu = vec![0.0; c];
            let mut trial_x = vec![0.0; y.len()];
            let mut accepted = false;
            let mut flat = false;
            for _ in 0..60 {
                for a in 0..c {
                    trial_mu[a] = mu[a] + lam * step[a];
                }
                let d = self.primal(y, &trial_mu, &mut trial_x);
                if d >= dual + 1e-4 * lam * slope {
                    accepted = true;
                    break;
                }
                // at the rounding floor of the dual
                if (d - dual).abs() <= 1e-15 * dual.abs().max(1.0) {
                    accepted = true;
                    flat = true;
                    break;
                }
                lam *= 0.5;
            }
            if !accepted {
                break;
            }
            mu.copy_from_slice(&trial_mu);
            x.copy_from_slice(&trial_x);
            dual = self.primal(y, mu, &mut x);
            if flat {
                break;
            }
        }
        x
    }

    /// Largest violation of the unit rows and of the population rows, the
    /// latter as a share of total enrollment.
    pub fn residuals(&self, x: &[f64]) -> (f64, f64) {
        let t = self.n_types();
        let n_total: f64 = self.sizes.iter().sum();
        let members = self.block_members();
        let mut simplex = 0.0f64;
        for g in 0..self.sizes.len() {
            for (b, idx) in members.iter().enumerate() {
                let s: f64 = idx.iter().map(|&j| x[g * t + j]).sum();
                simplex = simplex.max((s - self.caps[b]).abs());
            }
        }
        let pop = self
            .dual_gradient(x)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            / n_total;
        (simplex, pop)
    }
}
