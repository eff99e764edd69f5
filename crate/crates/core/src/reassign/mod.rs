//! Target-entropy reassignment of students across units.
//!
//! Given observed type shares `p̂_tg` per unit, find shares `p_tg` closest to
//! them in mean squared distance,
//!
//! ```text
//! min (1/G) sum_g sum_t (p_tg - p̂_tg)^2
//!   s.t. sum_t p_tg = 1                 for every unit g
//!        sum_g p_tg n_g = N_t           for every type t (or race, in race mode)
//!        H(p) = H*
//! ```
//!
//! where `H` is the entropy index computed on race shares. The entropy
//! equality is handled by an augmented Lagrangian; every inner iteration is
//! a spectral projected gradient step onto the linear polytope, projected
//! exactly. Fractional solutions are rounded into integer counts and a
//! per-student mapping by unbiased dependent rounding.

mod project;
mod round;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{race_of, SchoolSystem, StudentRecord, NUM_RACES, NUM_TYPES};
use crate::segregation::entropy_unchecked;
use project::Polytope;

/// Tolerance under which a target counts as the observed index.
const SAME_TARGET: f64 = 1e-12;
/// Race shares are floored here inside the entropy gradient.
const Q_FLOOR: f64 = 1e-16;
const MAX_PERMUTED_UNITS: usize = 5;
const MAX_STALLED: usize = 4;
const RHO_COLD: f64 = 10.0;
/// Inner iterations one run may spend, in units of `max_inner`.
const WORK_BUDGET: usize = 4;
const RHO_WARM: f64 = 100.0;
const STALL_WINDOW: usize = 50;
/// Longest move of one share in a single gradient step.
const MAX_STEP: f64 = 0.2;

/// Which totals reassignment must keep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conservation {
    /// Every type keeps its statewide population.
    #[default]
    Type,
    /// Only race populations are kept; type mixes within a race may change.
    Race,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReassignmentProblem {
    /// `(school_id, cohort_id)` of each unit.
    pub units: Vec<(u32, u32)>,
    /// Enrollment `n_g` of each unit.
    pub sizes: Vec<f64>,
    /// Observed type shares `p̂_tg`, one row per unit.
    pub observed: Vec<[f64; NUM_TYPES]>,
    /// Target index `H*`.
    pub target: f64,
    pub conservation: Conservation,
}

impl ReassignmentProblem {
    pub fn new(
        units: Vec<(u32, u32)>,
        sizes: Vec<f64>,
        observed: Vec<[f64; NUM_TYPES]>,
        target: f64,
        conservation: Conservation,
    ) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if units.len() != sizes.len() || observed.len() != sizes.len() {
            return Err(Error::InvalidInput(
                "units, sizes and shares differ in length".into(),
            ));
        }
        if let Some(s) = sizes.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "unit size {s} must be positive"
            )));
        }
        for (u, row) in units.iter().zip(&observed) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "shares of unit school={} cohort={} are not a distribution",
                    u.0, u.1
                )));
            }
        }
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::InvalidInput(format!(
                "target index {target} outside [0, 1]"
            )));
        }
        Ok(ReassignmentProblem {
            units,
            sizes,
            observed,
            target,
            conservation,
        })
    }

    /// Treats every class of `cohort` (default: the last cohort) as a unit.
    pub fn from_system(
        system: &SchoolSystem,
        cohort: Option<u32>,
        target: f64,
        conservation: Conservation,
    ) -> Result<Self> {
        let cohort = match cohort {
            Some(g) => g,
            None => *system.cohort_ids().last().ok_or(Error::EmptyDataset)?,
        };
        let classes: Vec<_> = system
            .classrooms
            .iter()
            .filter(|c| c.cohort_id == cohort)
            .collect();
        if classes.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no classes in cohort {cohort}"
            )));
        }
        let units = classes.iter().map(|c| c.key()).collect();
        let sizes = classes.iter().map(|c| f64::from(c.size())).collect();
        let observed = classes
            .iter()
            .map(|c| {
                let n = f64::from(c.size());
                c.counts.map(|k| f64::from(k) / n)
            })
            .collect();
        Self::new(units, sizes, observed, target, conservation)
    }

    pub fn with_target(&self, target: f64) -> Result<Self> {
        Self::new(
            self.units.clone(),
            self.sizes.clone(),
            self.observed.clone(),
            target,
            self.conservation,
        )
    }

    pub fn total(&self) -> f64 {
        self.sizes.iter().sum()
    }

    /// Statewide population of each type.
    pub fn type_totals(&self) -> [f64; NUM_TYPES] {
        let mut out = [0.0; NUM_TYPES];
        for (row, n) in self.observed.iter().zip(&self.sizes) {
            for t in 0..NUM_TYPES {
                out[t] += row[t] * n;
            }
        }
        out
    }

    /// Entropy index of arbitrary shares on these units.
    pub fn index_of(&self, shares: &[[f64; NUM_TYPES]]) -> Result<f64> {
        let ctx = Context::new(self)?;
        Ok(ctx.entropy(&ctx.compact(shares)))
    }

    /// Entropy index of the observed shares.
    pub fn observed_index(&self) -> Result<f64> {
        self.index_of(&self.observed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Largest `|sum_t p_tg - 1|`.
    pub simplex: f64,
    /// Largest population violation as a share of total enrollment.
    pub population: f64,
    /// `|H(p) - H*|`.
    pub entropy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// The best start still violates a constraint beyond tolerance.
    NotConverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReassignmentSolution {
    pub units: Vec<(u32, u32)>,
    pub sizes: Vec<f64>,
    pub shares: Vec<[f64; NUM_TYPES]>,
    pub objective: f64,
    pub target: f64,
    pub achieved_index: f64,
    pub residuals: Residuals,
    pub status: SolveStatus,
    /// `[H_min, H_max]` attainable under the constraints.
    pub attainable: [f64; 2],
    /// Index of the winning start; one past the starts for a packing plan.
    pub start: usize,
    pub outer_iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReassignOptions {
    pub starts: usize,
    /// Seed of the perturbed starts.
    pub seed: u64,
    /// Stop once `|H(p) - H*|` is below this.
    pub entropy_tol: f64,
    /// Largest acceptable entropy violation for an optimal status.
    pub entropy_accept: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for ReassignOptions {
    fn default() -> Self {
        ReassignOptions {
            starts: 12,
            seed: 0,
            entropy_tol: 1e-10,
            entropy_accept: 1e-6,
            max_outer: 60,
            max_inner: 3000,
        }
    }
}

/// Compact representation over the types present anywhere.
struct Context {
    types: Vec<usize>,
    race: Vec<usize>,
    sizes: Vec<f64>,
    n: f64,
    hbar: f64,
    observed: Vec<f64>,
    poly: Polytope,
    /// Statewide share of each race.
    race_share: [f64; NUM_RACES],
}

impl Context {
    fn new(prob: &ReassignmentProblem) -> Result<Self> {
        let totals = prob.type_totals();
        let types: Vec<usize> = (0..NUM_TYPES).filter(|&t| totals[t] > 0.0).collect();
        let race: Vec<usize> = types.iter().map(|&t| race_of(t)).collect();
        let n = prob.total();
        let mut race_tot = [0.0; NUM_RACES];
        for &t in &types {
            race_tot[race_of(t)] += totals[t];
        }
        let race_share = race_tot.map(|v| v / n);
        let hbar = entropy_unchecked(&race_share);
        if hbar <= 0.0 {
            return Err(Error::EntropyUndefined);
        }
        let (group, group_totals) = match prob.conservation {
            Conservation::Type => (
                (0..types.len()).collect(),
                types.iter().map(|&t| totals[t]).collect(),
            ),
            Conservation::Race => {
                // groups are the races that occur, numbered densely
                let mut ids = BTreeMap::new();
                for &r in &race {
                    let k = ids.len();
                    ids.entry(r).or_insert(k);
                }
                let mut tot = vec![0.0; ids.len()];
                for &r in &race {
                    tot[ids[&r]] = race_tot[r];
                }
                (race.iter().map(|r| ids[r]).collect(), tot)
            }
        };
        let mut ctx = Context {
            race,
            sizes: prob.sizes.clone(),
            n,
            hbar,
            observed: Vec::new(),
            poly: Polytope {
                sizes: prob.sizes.clone(),
                group,
                totals: group_totals,
                block: vec![0; types.len()],
                caps: vec![1.0],
            },
            types,
            race_share,
        };
        ctx.observed = ctx.compact(&prob.observed);
        Ok(ctx)
    }

    fn t(&self) -> usize {
        self.types.len()
    }

    fn compact(&self, shares: &[[f64; NUM_TYPES]]) -> Vec<f64> {
        shares
            .iter()
            .flat_map(|row| self.types.iter().map(move |&t| row[t]))
            .collect()
    }

    fn expand(&self, p: &[f64]) -> Vec<[f64; NUM_TYPES]> {
        p.chunks(self.t())
            .map(|c| {
                let mut row = [0.0; NUM_TYPES];
                for (j, &t) in self.types.iter().enumerate() {
                    row[t] = c[j];
                }
                row
            })
            .collect()
    }

    fn race_shares(&self, pg: &[f64]) -> [f64; NUM_RACES] {
        let mut q = [0.0; NUM_RACES];
        for (j, v) in pg.iter().enumerate() {
            q[self.race[j]] += v.max(0.0);
        }
        q
    }

    fn entropy(&self, p: &[f64]) -> f64 {
        let t = self.t();
        let mut acc = 0.0;
        for (g, n) in self.sizes.iter().enumerate() {
            acc += n * entropy_unchecked(&self.race_shares(&p[g * t..(g + 1) * t]));
        }
        1.0 - acc / (self.n * self.hbar)
    }

    fn entropy_grad(&self, p: &[f64], grad: &mut [f64]) {
        let t = self.t();
        for (g, n) in self.sizes.iter().enumerate() {
            let q = self.race_shares(&p[g * t..(g + 1) * t]);
            let scale = n / (self.n * self.hbar);
            for j in 0..t {
                grad[g * t + j] = scale * (q[self.race[j]].max(Q_FLOOR).ln() + 1.0);
            }
        }
    }

    fn objective(&self, p: &[f64]) -> f64 {
        p.iter()
            .zip(&self.observed)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.sizes.len() as f64
    }

    fn project(&self, y: &[f64], mu: &mut Vec<f64>) -> Vec<f64> {
        if mu.len() != self.poly.n_groups() {
            *mu = vec![0.0; self.poly.n_groups()];
        }
        self.poly.project(y, mu)
    }

    /// Every unit at the statewide type mix: the `H = 0` point.
    fn uniform(&self) -> Vec<f64> {
        let t = self.t();
        let mut shares = vec![0.0; t];
        for g in 0..self.sizes.len() {
            for j in 0..t {
                shares[j] += self.observed[g * t + j] * self.sizes[g] / self.n;
            }
        }
        shares
            .iter()
            .copied()
            .cycle()
            .take(t * self.sizes.len())
            .collect()
    }

    /// Northwest-corner packings of types into units; the most segregated
    /// one bounds the attainable index from below.
    fn packings(&self) -> Vec<(f64, Vec<f64>)> {
        let t = self.t();
        let g = self.sizes.len();
        let type_tot: Vec<f64> = (0..t)
            .map(|j| {
                (0..g)
                    .map(|k| self.observed[k * t + j] * self.sizes[k])
                    .sum()
            })
            .collect();
        let mut unit_orders: Vec<Vec<usize>> = vec![(0..g).collect()];
        let mut asc: Vec<usize> = (0..g).collect();
        asc.sort_by(|&a, &b| self.sizes[a].total_cmp(&self.sizes[b]));
        unit_orders.push(asc.clone());
        asc.reverse();
        unit_orders.push(asc);
        if g <= MAX_PERMUTED_UNITS {
            unit_orders = permutations(g);
        }
        let perms = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let mut out = Vec::new();
        for perm in perms {
            let mut type_order: Vec<usize> = (0..t).collect();
            type_order.sort_by_key(|&j| (perm.iter().position(|&r| r == self.race[j]).unwrap(), j));
            for units in &unit_orders {
                let p = northwest_corner(&type_order, units, &type_tot, &self.sizes, t);
                out.push((self.entropy(&p), p));
            }
        }
        out
    }

    fn attainable(&self) -> (f64, Vec<f64>) {
        self.packings()
            .into_iter()
            .fold((f64::NEG_INFINITY, Vec::new()), |best, cand| {
                if cand.0 > best.0 {
                    cand
                } else {
                    best
                }
            })
    }

    /// Point on the segment from `a` to `b` whose index equals `target`,
    /// assuming the index at `a` and `b` brackets it.
    fn bracket(&self, a: &[f64], b: &[f64], target: f64) -> Vec<f64> {
        let at = |s: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect() };
        let fa = self.entropy(a) - target;
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (self.entropy(&at(mid)) - target).signum() == fa.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(0.5 * (lo + hi))
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..n {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

fn northwest_corner(
    type_order: &[usize],
    unit_order: &[usize],
    type_tot: &[f64],
    sizes: &[f64],
    t: usize,
) -> Vec<f64> {
    let mut p = vec![0.0; t * sizes.len()];
    let mut supply: Vec<f64> = type_tot.to_vec();
    let mut ti = 0;
    for &g in unit_order {
        let mut room = sizes[g];
        while room > 1e-12 && ti < type_order.len() {
            let j = type_order[ti];
            let take = supply[j].min(room);
            p[g * t + j] += take / sizes[g];
            supply[j] -= take;
            room -= take;
            if supply[j] <= 1e-12 {
                ti += 1;
            }
        }
    }
    p
}

/// `[H_min, H_max]`: zero is always attainable by giving every unit the
/// statewide mix; the upper end is the most segregated northwest-corner
/// packing over race orders and unit orders.
pub fn attainable_entropy_range(prob: &ReassignmentProblem) -> Result<[f64; 2]> {
    let ctx = Context::new(prob)?;
    Ok([0.0, ctx.attainable().0.max(0.0)])
}

struct Run {
    p: Vec<f64>,
    objective: f64,
    violation: f64,
    outer: usize,
}

/// Spectral projected gradient on `f + mu c + rho/2 c^2`.
fn spg(
    ctx: &Context,
    x0: Vec<f64>,
    target: f64,
    mu: f64,
    rho: f64,
    pmu: &mut Vec<f64>,
    max_iter: usize,
) -> (Vec<f64>, usize) {
    let m = x0.len();
    let g_units = ctx.sizes.len() as f64;
    let value_grad = |x: &[f64], grad: &mut [f64]| -> f64 {
        let c = ctx.entropy(x) - target;
        ctx.entropy_grad(x, grad);
        let w = mu + rho * c;
        for i in 0..m {
            grad[i] = 2.0 * (x[i] - ctx.observed[i]) / g_units + w * grad[i];
        }
        ctx.objective(x) + mu * c + 0.5 * rho * c * c
    };
    let mut x = x0;
    let mut grad = vec![0.0; m];
    let mut fx = value_grad(&x, &mut grad);
    let mut history = vec![fx];
    let tol = 1e-11 / g_units;
    let mut alpha: f64 = 0.1 / grad.iter().fold(1e-300f64, |a, v| a.max(v.abs()));
    let mut gn = vec![0.0; m];
    let mut iters = 0;
    for _ in 0..max_iter {
        iters += 1;
        let step: Vec<f64> = x.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let pg = ctx.project(&step, pmu);
        let pgn = pg
            .iter()
            .zip(&x)
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        if pgn <= tol {
            break;
        }
        // steps far beyond the unit box only cost projection accuracy
        let gmax = grad.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let alpha_k = alpha.min(MAX_STEP / gmax.max(1e-300));
        let trial: Vec<f64> = x.iter().zip(&grad).map(|(a, b)| a - alpha_k * b).collect();
        let d: Vec<f64> = ctx
            .project(&trial, pmu)
            .iter()
            .zip(&x)
            .map(|(a, b)| a - b)
            .collect();
        let slope: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
        let fmax = history
            .iter()
            .rev()
            .take(10)
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut lam = 1.0;
        let mut xn = vec![0.0; m];
        let mut fn_ = f64::INFINITY;
        for _ in 0..50 {
            for i in 0..m {
                xn[i] = x[i] + lam * d[i];
            }
            fn_ = value_grad(&xn, &mut gn);
            if fn_ <= fmax + 1e-4 * lam * slope {
                break;
            }
            lam *= 0.5;
        }
        if !(fn_ < f64::INFINITY) || fn_ > fmax {
            break;
        }
        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..m {
            let s = xn[i] - x[i];
            ss += s * s;
            sy += s * (gn[i] - grad[i]);
        }
        alpha = if sy > 0.0 {
            (ss / sy).clamp(1e-12, 1e12)
        } else {
            1e12
        };
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut grad, &mut gn);
        fx = fn_;
        history.push(fx);
        if ss == 0.0 {
            break;
        }
        let len = history.len();
        if len > STALL_WINDOW {
            let old = history[len - 1 - STALL_WINDOW];
            if old - fx <= 1e-10 * fx.abs().max(1e-300) {
                break;
            }
        }
    }
    (x, iters)
}

fn augmented_lagrangian(
    ctx: &Context,
    start: Vec<f64>,
    target: f64,
    warm: bool,
    opts: &ReassignOptions,
) -> Run {
    let mut pmu = Vec::new();
    let mut p = ctx.project(&start, &mut pmu);
    // a warm run starts from the least-squares multiplier, which keeps
    // level-set starts near the level set; a cold run roams more
    let m = p.len();
    let mut gc = vec![0.0; m];
    ctx.entropy_grad(&p, &mut gc);
    let g_units = ctx.sizes.len() as f64;
    let (mut fc, mut cc) = (0.0, 0.0);
    for i in 0..m {
        fc += 2.0 * (p[i] - ctx.observed[i]) / g_units * gc[i];
        cc += gc[i] * gc[i];
    }
    let (mut mu, mut rho) = if warm && cc > 0.0 {
        (-fc / cc, RHO_WARM)
    } else {
        (0.0, RHO_COLD)
    };
    let mut prev = f64::INFINITY;
    let mut outer = 0;
    let mut stalled = 0;
    let mut work = 0;
    for k in 0..opts.max_outer {
        outer = k + 1;
        let (next, iters) = spg(ctx, p, target, mu, rho, &mut pmu, opts.max_inner);
        p = next;
        work += iters;
        // clean up rounding drift from long step sequences
        p = ctx.project(&p, &mut pmu);
        let c = ctx.entropy(&p) - target;
        if c.abs() <= opts.entropy_tol || work > WORK_BUDGET * opts.max_inner {
            break;
        }
        // a start stuck on a face where the penalty cannot move it
        stalled = if c.abs() > 0.5 * prev { stalled + 1 } else { 0 };
        if stalled >= MAX_STALLED {
            break;
        }
        mu += rho * c;
        if c.abs() > 0.25 * prev {
            rho = (rho * 10.0).min(1e12);
        }
        prev = c.abs();
    }
    Run {
        objective: ctx.objective(&p),
        violation: (ctx.entropy(&p) - target).abs(),
        p,
        outer,
    }
}

/// Shares closest to the observed ones with index `H*`: the observed
/// shares themselves when they already hit the target, otherwise the best
/// of several augmented-Lagrangian runs.
pub fn solve_reassignment(
    prob: &ReassignmentProblem,
    opts: &ReassignOptions,
) -> Result<ReassignmentSolution> {
    let ctx = Context::new(prob)?;
    let target = prob.target;
    let (hmax, packing) = ctx.attainable();
    let attainable = [0.0, hmax.max(0.0)];
    if target > attainable[1] + 1e-9 {
        return Err(Error::Infeasible {
            target,
            min: attainable[0],
            max: attainable[1],
        });
    }
    let observed_h = ctx.entropy(&ctx.observed);
    let finish = |p: Vec<f64>, start: usize, outer: usize| {
        let (simplex, population) = ctx.poly.residuals(&p);
        let achieved = ctx.entropy(&p);
        let residuals = Residuals {
            simplex,
            population,
            entropy: (achieved - target).abs(),
        };
        let ok = simplex <= 1e-8 && population <= 1e-8 && residuals.entropy <= opts.entropy_accept;
        ReassignmentSolution {
            units: prob.units.clone(),
            sizes: prob.sizes.clone(),
            shares: ctx.expand(&p),
            objective: ctx.objective(&p),
            target,
            achieved_index: achieved,
            residuals,
            status: if ok {
                SolveStatus::Optimal
            } else {
                SolveStatus::NotConverged
            },
            attainable,
            start,
            outer_iterations: outer,
        }
    };
    if (observed_h - target).abs() <= SAME_TARGET {
        let mut sol = finish(ctx.observed.clone(), 0, 0);
        sol.shares = prob.observed.clone();
        sol.objective = 0.0;
        return Ok(sol);
    }
    if target == 0.0 {
        return Ok(finish(zero_index_projection(&ctx), 0, 0));
    }

    // (start, on the level set)
    let mut starts = vec![(ctx.observed.clone(), false)];
    if target < observed_h {
        // the sublevel set of the index is convex here, so one basin
        starts.push((ctx.bracket(&ctx.observed, &ctx.uniform(), target), true));
    } else {
        // raising the index is nonconvex: every packing past the target
        // seeds a basin, ranked by the cost of its bracket point
        let mut seeds: Vec<(f64, Vec<f64>)> = ctx
            .packings()
            .into_iter()
            .filter(|(h, _)| *h > target)
            .map(|(_, p)| {
                let b = ctx.bracket(&ctx.observed, &p, target);
                (ctx.objective(&b), b)
            })
            .collect();
        seeds.sort_by(|a, b| a.0.total_cmp(&b.0));
        seeds.dedup_by(|a, b| (a.0 - b.0).abs() <= 1e-12 * b.0.abs().max(1.0));
        starts.extend(
            seeds
                .into_iter()
                .take(opts.starts.max(1))
                .map(|s| (s.1, true)),
        );
        if starts.len() == 1 {
            starts.push((ctx.bracket(&ctx.observed, &packing, target), true));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut pmu = Vec::new();
        while starts.len() < opts.starts {
            let noisy: Vec<f64> = ctx
                .observed
                .iter()
                .map(|v| v + rng.gen_range(-0.2..0.2))
                .collect();
            starts.push((ctx.project(&noisy, &mut pmu), false));
        }
    }

    // level-set starts also get a warm run
    let jobs: Vec<(usize, bool)> = starts
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            if s.1 {
                vec![(i, false), (i, true)]
            } else {
                vec![(i, false)]
            }
        })
        .collect();
    let mut runs: Vec<(usize, Run)> = jobs
        .into_par_iter()
        .map(|(i, warm)| {
            (
                i,
                augmented_lagrangian(&ctx, starts[i].0.clone(), target, warm, opts),
            )
        })
        .collect();
    // near the top of the range the packings themselves are candidates
    for (h, p) in ctx.packings() {
        if (h - target).abs() <= opts.entropy_accept {
            let run = Run {
                objective: ctx.objective(&p),
                violation: (h - target).abs(),
                p,
                outer: 0,
            };
            runs.push((starts.len(), run));
        }
    }
    let feasible = |r: &Run| r.violation <= opts.entropy_accept;
    let best = runs
        .iter()
        .enumerate()
        .min_by(|(_, (_, a)), (_, (_, b))| {
            feasible(b).cmp(&feasible(a)).then(if feasible(a) {
                a.objective.total_cmp(&b.objective)
            } else {
                a.violation.total_cmp(&b.violation)
            })
        })
        .map(|(i, _)| i)
        .unwrap();
    let (start, run) = runs.swap_remove(best);
    Ok(finish(run.p, start, run.outer))
}

/// At `H* = 0` every unit must carry the statewide race mix, which makes
/// the problem a single projection.
fn zero_index_projection(ctx: &Context) -> Vec<f64> {
    let mut races: Vec<usize> = ctx.race.clone();
    races.sort_unstable();
    races.dedup();
    let block: Vec<usize> = ctx
        .race
        .iter()
        .map(|r| races.binary_search(r).unwrap())
        .collect();
    let caps: Vec<f64> = races.iter().map(|&r| ctx.race_share[r]).collect();
    let poly = Polytope {
        block,
        caps,
        ..ctx.poly.clone()
    };
    let mut mu = vec![0.0; poly.n_groups()];
    poly.project(&ctx.observed, &mut mu)
}

/// Integer counts per unit and the per-student moves realizing them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub units: Vec<(u32, u32)>,
    pub counts: Vec<[u32; NUM_TYPES]>,
    pub moves: Vec<Move>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub student_id: u64,
    pub old_school: u32,
    pub new_school: u32,
}

/// Rounds `shares * sizes` into integer counts with the same unit sizes and
/// type totals, unbiased entrywise. Type totals must be integral.
pub fn round_counts(
    shares: &[[f64; NUM_TYPES]],
    sizes: &[f64],
    seed: u64,
) -> Result<Vec<[u32; NUM_TYPES]>> {
    let g = shares.len();
    let mut x = vec![0.0; g * NUM_TYPES];
    for (k, row) in shares.iter().enumerate() {
        for t in 0..NUM_TYPES {
            x[k * NUM_TYPES + t] = row[t] * sizes[k];
        }
    }
    let integral = |v: f64| (v - v.round()).abs() <= 1e-6;
    if let Some(s) = sizes.iter().find(|s| !integral(**s)) {
        return Err(Error::InvalidInput(format!(
            "unit size {s} is not an integer"
        )));
    }
    for t in 0..NUM_TYPES {
        let tot: f64 = (0..g).map(|k| x[k * NUM_TYPES + t]).sum();
        if !integral(tot) {
            return Err(Error::InvalidInput(format!(
                "type {t} total {tot} is not an integer; race-only solutions cannot be rounded"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = round::dependent_round(&x, g, NUM_TYPES, &mut rng);
    repair(m, &x, g, sizes)
}

/// Fixes marginal drift left by floating-point slop, moving single students
/// between units within a type.
fn repair(mut m: Vec<i64>, x: &[f64], g: usize, sizes: &[f64]) -> Result<Vec<[u32; NUM_TYPES]>> {
    let t = NUM_TYPES;
    for j in 0..t {
        let want = (0..g).map(|k| x[k * t + j]).sum::<f64>().round() as i64;
        let mut have: i64 = (0..g).map(|k| m[k * t + j]).sum();
        while have != want {
            // adjust the unit whose entry is farthest from its mean
            let dir = (want - have).signum();
            let k = (0..g)
                .filter(|&k| dir > 0 || m[k * t + j] > 0)
                .max_by(|&a, &b| {
                    let da = dir as f64 * (x[a * t + j] - m[a * t + j] as f64);
                    let db = dir as f64 * (x[b * t + j] - m[b * t + j] as f64);
                    da.total_cmp(&db)
                })
                .unwrap();
            m[k * t + j] += dir;
            have += dir;
        }
    }
    // rows: move one student of a type from a full unit to a short one
    loop {
        let row = |m: &[i64], k: usize| m[k * t..(k + 1) * t].iter().sum::<i64>();
        let over = (0..g).find(|&k| row(&m, k) > sizes[k].round() as i64);
        let under = (0..g).find(|&k| row(&m, k) < sizes[k].round() as i64);
        match (over, under) {
            (Some(a), Some(b)) => {
                let j = (0..t).find(|&j| m[a * t + j] > 0).unwrap();
                m[a * t + j] -= 1;
                m[b * t + j] += 1;
            }
            (None, None) => break,
            _ => {
                return Err(Error::NonFinite(
                    "rounding marginals are inconsistent".into(),
                ))
            }
        }
    }
    Ok((0..g)
        .map(|k| {
            let mut row = [0u32; NUM_TYPES];
            for j in 0..t {
                row[j] = m[k * t + j] as u32;
            }
            row
        })
        .collect())
}

/// Rounds a solution and moves actual students: within each type, students
/// of the reassigned units are shuffled by seed and dealt into the new
/// counts in unit order.
pub fn round_assignment(
    solution: &ReassignmentSolution,
    records: &[StudentRecord],
    seed: u64,
) -> Result<Assignment> {
    let counts = round_counts(&solution.shares, &solution.sizes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let unit_pos: BTreeMap<(u32, u32), usize> = solution
        .units
        .iter()
        .enumerate()
        .map(|(i, u)| (*u, i))
        .collect();
    let mut by_type: Vec<Vec<&StudentRecord>> = vec![Vec::new(); NUM_TYPES];
    let mut seen = vec![0u32; solution.units.len()];
    for r in records {
        if let Some(&k) = unit_pos.get(&(r.school_id, r.cohort_id)) {
            by_type[r.student_type.index()].push(r);
            seen[k] += 1;
        }
    }
    for (k, (&s, n)) in seen.iter().zip(&solution.sizes).enumerate() {
        if f64::from(s) != n.round() {
            return Err(Error::InvalidInput(format!(
                "records hold {s} students for unit school={} cohort={}, expected {n}",
                solution.units[k].0, solution.units[k].1
            )));
        }
    }
    let mut moves = Vec::new();
    for (t, students) in by_type.iter_mut().enumerate() {
        students.sort_by_key(|r| r.student_id);
        students.shuffle(&mut rng);
        let mut it = students.iter();
        for (k, row) in counts.iter().enumerate() {
            for _ in 0..row[t] {
                let r = it.next().ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "not enough students of type {t} to fill the new counts"
                    ))
                })?;
                moves.push(Move {
                    student_id: r.student_id,
                    old_school: r.school_id,
                    new_school: solution.units[k].0,
                });
            }
        }
    }
    moves.sort_by_key(|m| m.student_id);
    Ok(Assignment {
        units: solution.units.clone(),
        counts,
        moves,
    })
}

/// Applies moves to records, rewriting school ids.
pub fn apply_moves(records: &[StudentRecord], moves: &[Move]) -> Vec<StudentRecord> {
    let map: BTreeMap<u64, u32> = moves.iter().map(|m| (m.student_id, m.new_school)).collect();
    records
        .iter()
        .map(|r| StudentRecord {
            school_id: map.get(&r.student_id).copied().unwrap_or(r.school_id),
            ..r.clone()
        })
        .collect()
}
