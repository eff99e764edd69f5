//! Brute-force oracle for the target-entropy reassignment problem on small
//! instances.
//!
//! The search runs over unit race shares. For two units, race shares in the
//! first unit pin everything except the within-race type mix, whose best
//! value is a clipped shift (water-filling). With one type per race the
//! race shares are the whole solution for any number of units. The last
//! free coordinate is solved on the entropy constraint by bisection; the
//! rest are gridded and zoomed.

use coursegame::model::NUM_TYPES;
use coursegame::reassign::{Conservation, ReassignmentProblem};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Instance {
    /// Type index and race of each type in play.
    pub types: Vec<(usize, usize)>,
    pub sizes: Vec<f64>,
    /// Counts per unit (rows) and type (columns).
    pub counts: Vec<Vec<f64>>,
}

impl Instance {
    pub fn n_races(&self) -> usize {
        self.races().len()
    }

    pub fn races(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.types.iter().map(|t| t.1).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn shares(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .zip(&self.sizes)
            .map(|(c, n)| c.iter().map(|v| v / n).collect())
            .collect()
    }

    pub fn problem(&self, target: f64) -> ReassignmentProblem {
        let observed = self
            .shares()
            .iter()
            .map(|row| {
                let mut full = [0.0; NUM_TYPES];
                for (j, &(t, _)) in self.types.iter().enumerate() {
                    full[t] = row[j];
                }
                full
            })
            .collect();
        let units = (0..self.sizes.len() as u32).map(|g| (g + 1, 2)).collect();
        ReassignmentProblem::new(
            units,
            self.sizes.clone(),
            observed,
            target,
            Conservation::Type,
        )
        .unwrap()
    }

    pub fn race_totals(&self) -> Vec<f64> {
        self.races()
            .iter()
            .map(|&r| {
                self.counts
                    .iter()
                    .flat_map(|c| {
                        self.types
                            .iter()
                            .zip(c)
                            .filter(move |(t, _)| t.1 == r)
                            .map(|(_, v)| *v)
                    })
                    .sum()
            })
            .collect()
    }

    /// Entropy index from per-unit race shares (rows align with `races()`).
    pub fn index(&self, q: &[Vec<f64>]) -> f64 {
        let n: f64 = self.sizes.iter().sum();
        let tot = self.race_totals();
        let ent = |p: &[f64]| -> f64 { p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum() };
        let hbar = ent(&tot.iter().map(|v| v / n).collect::<Vec<_>>());
        let mut acc = 0.0;
        for (g, ng) in self.sizes.iter().enumerate() {
            acc += ng / n * (hbar - ent(&q[g])) / hbar;
        }
        acc
    }
}

/// Random instance with `g` units and the given types; every unit and type
/// is populated.
pub fn random_instance(rng: &mut ChaCha8Rng, types: Vec<(usize, usize)>, g: usize) -> Instance {
    let t = types.len();
    loop {
        let counts: Vec<Vec<f64>> = (0..g)
            .map(|_| (0..t).map(|_| f64::from(rng.gen_range(0..40u32))).collect())
            .collect();
        let sizes: Vec<f64> = counts.iter().map(|c| c.iter().sum()).collect();
        let type_ok = (0..t).all(|j| counts.iter().any(|c| c[j] > 0.0));
        if sizes.iter().all(|s| *s > 0.0) && type_ok {
            return Instance {
                types,
                sizes,
                counts,
            };
        }
    }
}

/// Instance data reused across evaluations.
struct Prepared<'a> {
    inst: &'a Instance,
    races: Vec<usize>,
    /// Column of each type per race, in race order.
    members: Vec<Vec<usize>>,
    phat: Vec<Vec<f64>>,
    race_tot: Vec<f64>,
    n: f64,
    hbar: f64,
}

fn ent(p: &[f64]) -> f64 {
    p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum()
}

impl<'a> Prepared<'a> {
    fn new(inst: &'a Instance) -> Self {
        let races = inst.races();
        let members: Vec<Vec<usize>> = races
            .iter()
            .map(|&r| {
                (0..inst.types.len())
                    .filter(|&j| inst.types[j].1 == r)
                    .collect()
            })
            .collect();
        let race_tot = inst.race_totals();
        let n: f64 = inst.sizes.iter().sum();
        let hbar = ent(&race_tot.iter().map(|v| v / n).collect::<Vec<_>>());
        Prepared {
            inst,
            races,
            members,
            phat: inst.shares(),
            race_tot,
            n,
            hbar,
        }
    }

    fn index(&self, q: &[Vec<f64>]) -> f64 {
        let mut acc = 0.0;
        for (g, ng) in self.inst.sizes.iter().enumerate() {
            acc += ng / self.n * (self.hbar - ent(&q[g])) / self.hbar;
        }
        acc
    }

    /// Per-unit race shares at `z` and the slack of every polytope
    /// constraint, all affine in `z`.
    fn fill(&self, z: &[f64], q: &mut [Vec<f64>], slack: &mut Vec<f64>) {
        let r = self.races.len();
        let g = self.inst.sizes.len();
        let sizes = &self.inst.sizes;
        slack.clear();
        for gi in 0..g - 1 {
            let mut s = 0.0;
            for k in 0..r - 1 {
                let v = z[gi * (r - 1) + k];
                q[gi][k] = v;
                s += v;
            }
            q[gi][r - 1] = 1.0 - s;
        }
        let last = g - 1;
        for k in 0..r {
            let used: f64 = (0..last).map(|gi| q[gi][k] * sizes[gi]).sum();
            q[last][k] = (self.race_tot[k] - used) / sizes[last];
        }
        for row in q.iter() {
            for &v in row {
                slack.push(v);
                slack.push(1.0 - v);
            }
        }
        if g == 2 {
            // the within-race type mix must also fit
            let (n0, n1) = (sizes[0], sizes[1]);
            for (k, members) in self.members.iter().enumerate() {
                let (mut lo, mut hi) = (0.0, 0.0);
                for &j in members {
                    let tot = self.inst.counts[0][j] + self.inst.counts[1][j];
                    lo += ((tot - n1) / n0).max(0.0);
                    hi += (tot / n0).min(1.0);
                }
                slack.push(q[0][k] - lo);
                slack.push(hi - q[0][k]);
            }
        }
    }

    /// Per-unit race shares at `z`, or `false` outside the polytope.
    fn race_shares(&self, z: &[f64], q: &mut [Vec<f64>], slack: &mut Vec<f64>) -> bool {
        self.fill(z, q, slack);
        if slack.iter().any(|v| *v < -1e-12) {
            return false;
        }
        for row in q.iter_mut() {
            for v in row.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        true
    }

    /// Objective at race shares `q` with the best within-race type mix.
    fn objective(&self, q: &[Vec<f64>]) -> f64 {
        let g = self.inst.sizes.len();
        let mut obj = 0.0;
        if g == 2 {
            let (n0, n1) = (self.inst.sizes[0], self.inst.sizes[1]);
            for (k, members) in self.members.iter().enumerate() {
                let want = q[0][k];
                let bounds: Vec<(f64, f64, f64)> = members
                    .iter()
                    .map(|&j| {
                        let tot = self.inst.counts[0][j] + self.inst.counts[1][j];
                        (((tot - n1) / n0).max(0.0), (tot / n0).min(1.0), tot)
                    })
                    .collect();
                let fill =
                    |nu: f64, j: usize, b: &(f64, f64, f64)| (self.phat[0][j] + nu).clamp(b.0, b.1);
                let (mut a, mut c) = (-2.0, 2.0);
                if members.len() > 1 {
                    for _ in 0..100 {
                        let mid = 0.5 * (a + c);
                        let s: f64 = members
                            .iter()
                            .zip(&bounds)
                            .map(|(&j, b)| fill(mid, j, b))
                            .sum();
                        if s < want {
                            a = mid;
                        } else {
                            c = mid;
                        }
                    }
                }
                for (&j, b) in members.iter().zip(&bounds) {
                    let p0 = if members.len() > 1 {
                        fill(0.5 * (a + c), j, b)
                    } else {
                        want
                    };
                    let p1 = (b.2 - p0 * n0) / n1;
                    obj += (p0 - self.phat[0][j]).powi(2) + (p1 - self.phat[1][j]).powi(2);
                }
            }
            return obj / 2.0;
        }
        for gi in 0..g {
            for (k, members) in self.members.iter().enumerate() {
                obj += (q[gi][k] - self.phat[gi][members[0]]).powi(2);
            }
        }
        obj / g as f64
    }
}

/// Best objective on the line through `z` along the last coordinate, at
/// points where the index equals `target`. The index is convex along the
/// line and the feasible part is an interval, so there are at most two
/// roots, one on each side of the minimum.
fn line_best(prep: &Prepared, z: &mut [f64], target: f64, q: &mut [Vec<f64>]) -> Option<f64> {
    let d = z.len();
    // the feasible part of the line, exactly, from affine slacks
    let (mut s0, mut s1) = (Vec::new(), Vec::new());
    z[d - 1] = 0.0;
    prep.fill(z, q, &mut s0);
    z[d - 1] = 1.0;
    prep.fill(z, q, &mut s1);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for (a, b) in s0.iter().zip(&s1) {
        let slope = b - a;
        if slope.abs() < 1e-15 {
            if *a < -1e-12 {
                return None;
            }
        } else if slope > 0.0 {
            lo = lo.max(-a / slope);
        } else {
            hi = hi.min(-a / slope);
        }
    }
    if lo > hi {
        return None;
    }
    let mut slack = Vec::new();
    let mut h_at = |x: f64, q: &mut [Vec<f64>]| -> Option<f64> {
        z[d - 1] = x;
        prep.race_shares(z, q, &mut slack)
            .then(|| prep.index(q) - target)
    };
    let mut f = |x: f64, q: &mut [Vec<f64>]| h_at(x, q).unwrap_or(f64::INFINITY);
    // golden section for the minimum of the index
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    for _ in 0..60 {
        let c = b - gr * (b - a);
        let e = a + gr * (b - a);
        if f(c, q) < f(e, q) {
            b = e;
        } else {
            a = c;
        }
    }
    let xm = 0.5 * (a + b);
    if f(xm, q) > 0.0 {
        return None;
    }
    let mut best = f64::INFINITY;
    for end in [lo, hi] {
        let fe = f(end, q);
        if fe < 0.0 {
            continue;
        }
        let (mut a, mut b) = (xm, end);
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if f(m, q) < 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        let root = if fe == 0.0 { end } else { 0.5 * (a + b) };
        if f(root, q).abs() < 1e-9 {
            best = best.min(prep.objective(q));
        }
    }
    best.is_finite().then_some(best)
}

/// Smallest objective found on the entropy level set `H = target`, over
/// every choice of which unit is solved from the conservation constraints.
/// Optima often sit where that unit has zero shares; rotating the units puts
/// such faces on grid edges.
pub fn oracle(inst: &Instance, target: f64) -> f64 {
    let g = inst.sizes.len();
    (0..g)
        .map(|shift| {
            let mut rot = inst.clone();
            rot.sizes.rotate_left(shift);
            rot.counts.rotate_left(shift);
            oracle_fixed(&rot, target)
        })
        .fold(f64::INFINITY, f64::min)
}

/// A coarse grid over all but the last coordinate, then a shrinking-grid
/// zoom around the best few distinct cells.
fn oracle_fixed(inst: &Instance, target: f64) -> f64 {
    let prep = Prepared::new(inst);
    let r = prep.races.len();
    let g = inst.sizes.len();
    assert!(
        g == 2 || inst.types.len() == r,
        "unsupported instance family"
    );
    let d = (r - 1) * (g - 1);
    assert!(
        (1..=4).contains(&d),
        "oracle supports up to four free coordinates"
    );
    let outer = d - 1;
    let mut q = vec![vec![0.0; r]; g];
    let mut z = vec![0.0; d];
    // best line value on a grid of `n` points per outer axis over a box
    let mut sweep = |center: &[f64], half: &[f64], n: usize, out: &mut Vec<(f64, Vec<f64>)>| {
        let total = n.pow(outer as u32);
        for idx in 0..total {
            let mut rem = idx;
            for i in 0..outer {
                let k = rem % n;
                rem /= n;
                let lo = (center[i] - half[i]).max(0.0);
                let hi = (center[i] + half[i]).min(1.0);
                z[i] = if n == 1 {
                    center[i]
                } else {
                    lo + (hi - lo) * k as f64 / (n - 1) as f64
                };
            }
            if let Some(v) = line_best(&prep, &mut z, target, &mut q) {
                out.push((v, z[..outer].to_vec()));
            }
        }
    };
    if outer == 0 {
        let mut out = Vec::new();
        sweep(&[], &[], 1, &mut out);
        return out.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    }
    let coarse = match outer {
        1 => 201,
        2 => 25,
        _ => 13,
    };
    let mut cands = Vec::new();
    sweep(&vec![0.5; outer], &vec![0.5; outer], coarse, &mut cands);
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    let cell = 1.0 / (coarse - 1) as f64;
    let mut seeds: Vec<(f64, Vec<f64>)> = Vec::new();
    for c in cands {
        let far = seeds.iter().all(|s| {
            s.1.iter()
                .zip(&c.1)
                .any(|(a, b)| (a - b).abs() > 2.5 * cell)
        });
        if far {
            seeds.push(c);
        }
        if seeds.len() == if outer == 1 { 4 } else { 3 } {
            break;
        }
    }
    let fine = match outer {
        1 => 11,
        2 => 11,
        _ => 5,
    };
    let mut best = f64::INFINITY;
    for (mut val, mut center) in seeds {
        let mut half = vec![2.0 * cell; outer];
        for _ in 0..40 {
            let mut out = Vec::new();
            sweep(&center, &half, fine, &mut out);
            if let Some(b) = out.into_iter().min_by(|a, b| a.0.total_cmp(&b.0)) {
                if b.0 <= val {
                    val = b.0;
                    center = b.1;
                }
            }
            for h in half.iter_mut() {
                *h *= 0.7;
            }
        }
        best = best.min(val);
    }
    best
}
