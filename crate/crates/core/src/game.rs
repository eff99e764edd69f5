//! Equilibrium engine: teacher encouragement probabilities, student best
//! responses and the Bayesian-Nash fixed point of one graduating class.
//!
//! The fixed point is solved on the present types of a class. For a type `t`
//! the best response conditional on the teacher's decision `b` is
//!
//! ```text
//! s_b(t) = logistic(x_t beta + b alpha + kappa_g + gamma_s + sum_t' lambda_tt' w_tt' sigma_t')
//! ```
//!
//! and the equilibrium belief is the mixture `sigma_t = (1 - phi_t) s_0(t) + phi_t s_1(t)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    linear_index, race_of, race_weights, weights_from_counts, Classroom, StudentParams,
    StudentType, TeacherParams, NUM_TYPES,
};

/// Bound on the social-incentive row average under which the best-response
/// map is a contraction (since `sigma (1 - sigma) <= 1/4`).
pub const CONTRACTION_BOUND: f64 = 4.0;

const MIN_DAMPING: f64 = 1.0 / 1024.0;
/// Decreasing steps after which a halved damping is doubled back.
const CALM_STEPS: usize = 20;
/// Residual below which Newton steps are tried before damped ones.
const NEWTON_ZONE: f64 = 1e-6;

/// Numerically stable logistic function.
#[inline]
pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `e^u / (1 + e^u)`; rejects non-finite input.
pub fn logistic(u: f64) -> Result<f64> {
    if !u.is_finite() {
        return Err(Error::NonFinite(format!("logistic argument {u}")));
    }
    Ok(sigmoid(u))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Sup-norm tolerance on the best-response residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial damping `d` in `sigma <- (1 - d) sigma + d BR(sigma)`.
    pub damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 10_000,
            damping: 1.0,
        }
    }
}

/// Teacher utility index of a type given (possibly fractional) class counts
/// and the combined cohort + school effect.
pub fn teacher_index_from_counts(
    teacher: &TeacherParams,
    counts: &[f64; NUM_TYPES],
    t: usize,
    fixed_effect: f64,
) -> f64 {
    let shares = race_weights(&weights_from_counts(counts, t));
    let row = &teacher.rho[race_of(t)];
    let social: f64 = row.iter().zip(&shares).map(|(r, s)| r * s).sum();
    linear_index(t, &teacher.delta) + fixed_effect + social
}

/// Probability that the teacher encourages a student of type `t`.
pub fn teacher_prob(teacher: &TeacherParams, c: &Classroom, t: StudentType) -> Result<f64> {
    c.class_weights(t)?;
    let fe = teacher.cohort_effect(c.cohort_id) + teacher.school_effect(c.school_id);
    logistic(teacher_index_from_counts(
        teacher,
        &c.counts_f64(),
        t.index(),
        fe,
    ))
}

/// Best response of a type-`t` student to beliefs `sigma` (indexed by type),
/// conditional on the teacher's decision `encouraged`.
pub fn student_br(
    student: &StudentParams,
    c: &Classroom,
    t: StudentType,
    encouraged: bool,
    sigma: &[f64; NUM_TYPES],
) -> Result<f64> {
    if let Some(bad) = sigma.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidInput(format!("belief {bad} outside [0, 1]")));
    }
    let w = c.class_weights(t)?;
    let ti = t.index();
    let row = &student.lambda[race_of(ti)];
    let social: f64 = (0..NUM_TYPES)
        .map(|u| row[race_of(u)] * w[u] * sigma[u])
        .sum();
    let b = if encouraged { student.alpha } else { 0.0 };
    logistic(
        linear_index(ti, &student.beta)
            + b
            + student.cohort_effect(c.cohort_id)
            + student.school_effect(c.school_id)
            + social,
    )
}

/// The best-response map of one class restricted to its present types.
#[derive(Clone, Debug)]
pub struct ClassGame {
    pub school_id: u32,
    pub cohort_id: u32,
    /// Present type indices, ascending.
    pub types: Vec<usize>,
    /// Teacher encouragement probability per present type.
    pub phi: Vec<f64>,
    /// Non-social part of the student index at `b = 0`.
    pub base: Vec<f64>,
    pub alpha: f64,
    /// Row-major `k x k` matrix of `lambda_tt' w_tt'` over present types.
    pub interaction: Vec<f64>,
}

impl ClassGame {
    /// Builds the game from counts. `teacher_fe` and `student_fe` are the
    /// combined cohort + school effects applied to every type.
    pub fn from_counts(
        teacher: &TeacherParams,
        student: &StudentParams,
        counts: &[f64; NUM_TYPES],
        teacher_fe: f64,
        student_fe: f64,
    ) -> Self {
        let types: Vec<usize> = (0..NUM_TYPES).filter(|&t| counts[t] > 0.0).collect();
        let phi = types
            .iter()
            .map(|&t| sigmoid(teacher_index_from_counts(teacher, counts, t, teacher_fe)))
            .collect();
        Self::with_phi(student, counts, phi, student_fe)
    }

    /// Builds the game with externally supplied teacher probabilities
    /// (aligned with the present types of `counts`).
    pub fn with_phi(
        student: &StudentParams,
        counts: &[f64; NUM_TYPES],
        phi: Vec<f64>,
        student_fe: f64,
    ) -> Self {
        let types: Vec<usize> = (0..NUM_TYPES).filter(|&t| counts[t] > 0.0).collect();
        assert_eq!(phi.len(), types.len(), "phi must align with present types");
        let k = types.len();
        let base = types
            .iter()
            .map(|&t| linear_index(t, &student.beta) + student_fe)
            .collect();
        let mut interaction = vec![0.0; k * k];
        for (i, &t) in types.iter().enumerate() {
            let w = weights_from_counts(counts, t);
            let row = &student.lambda[race_of(t)];
            for (j, &u) in types.iter().enumerate() {
                interaction[i * k + j] = row[race_of(u)] * w[u];
            }
        }
        ClassGame {
            school_id: 0,
            cohort_id: 0,
            types,
            phi,
            base,
            alpha: student.alpha,
            interaction,
        }
    }

    /// Builds the game of an observed classroom with its own fixed effects.
    pub fn for_classroom(teacher: &TeacherParams, student: &StudentParams, c: &Classroom) -> Self {
        let tfe = teacher.cohort_effect(c.cohort_id) + teacher.school_effect(c.school_id);
        let sfe = student.cohort_effect(c.cohort_id) + student.school_effect(c.school_id);
        let mut g = Self::from_counts(teacher, student, &c.counts_f64(), tfe, sfe);
        g.school_id = c.school_id;
        g.cohort_id = c.cohort_id;
        g
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    /// Social term `sum_j interaction[i][j] sigma_j` of present type `i`.
    #[inline]
    pub fn social(&self, i: usize, sigma: &[f64]) -> f64 {
        let k = self.len();
        self.interaction[i * k..(i + 1) * k]
            .iter()
            .zip(sigma)
            .map(|(a, s)| a * s)
            .sum()
    }

    /// Evaluates both conditional best responses and their mixture.
    pub fn best_response(&self, sigma: &[f64], s0: &mut [f64], s1: &mut [f64], mix: &mut [f64]) {
        for i in 0..self.len() {
            let u = self.base[i] + self.social(i, sigma);
            s0[i] = sigmoid(u);
            s1[i] = sigmoid(u + self.alpha);
            mix[i] = (1.0 - self.phi[i]) * s0[i] + self.phi[i] * s1[i];
        }
    }

    /// Equilibrium without strategic interaction, used as the starting point.
    pub fn no_interaction_point(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                (1.0 - self.phi[i]) * sigmoid(self.base[i])
                    + self.phi[i] * sigmoid(self.base[i] + self.alpha)
            })
            .collect()
    }

    /// `max_i sum_j |lambda_ij| w_ij` over present types.
    pub fn contraction_metric(&self) -> f64 {
        let k = self.len();
        (0..k)
            .map(|i| {
                self.interaction[i * k..(i + 1) * k]
                    .iter()
                    .map(|a| a.abs())
                    .sum()
            })
            .fold(0.0, f64::max)
    }

    /// Damped successive substitution from `init` (or the no-interaction
    /// point). Damping halves whenever the residual grows and creeps back
    /// after a run of decreasing residuals. Close to a fixed point, Newton
    /// steps finish the job when they reduce the residual.
    pub fn solve(&self, opts: &SolverOptions, init: Option<&[f64]>) -> Result<FixedPoint> {
        let k = self.len();
        let mut sigma = match init {
            Some(s) => {
                assert_eq!(s.len(), k, "initial point must align with present types");
                s.to_vec()
            }
            None => self.no_interaction_point(),
        };
        let metric = self.contraction_metric();
        let mut damping = opts.damping.clamp(1e-6, 1.0);
        if metric >= CONTRACTION_BOUND {
            damping = damping.min(0.5);
        }
        let start_damping = damping;
        let mut calm = 0;
        let mut s0 = vec![0.0; k];
        let mut s1 = vec![0.0; k];
        let mut mix = vec![0.0; k];
        let mut prev_residual = f64::INFINITY;
        let mut residual = f64::INFINITY;
        for iter in 1..=opts.max_iter {
            self.best_response(&sigma, &mut s0, &mut s1, &mut mix);
            residual = sup_residual(&sigma, &mix);
            if residual <= opts.tol {
                return Ok(FixedPoint {
                    sigma: mix,
                    sigma_b0: s0,
                    sigma_b1: s1,
                    iterations: iter,
                    residual,
                });
            }
            if residual < NEWTON_ZONE {
                if let Some(next) = self.newton_step(&sigma, &s0, &s1, &mix) {
                    sigma = next;
                    prev_residual = residual;
                    continue;
                }
            }
            if residual > prev_residual {
                damping = (damping * 0.5).max(MIN_DAMPING);
                calm = 0;
            } else {
                calm += 1;
                if calm >= CALM_STEPS && damping < start_damping {
                    damping = (damping * 2.0).min(start_damping);
                    calm = 0;
                }
            }
            prev_residual = residual;
            for (s, m) in sigma.iter_mut().zip(&mix) {
                *s = (1.0 - damping) * *s + damping * m;
            }
        }
        Err(Error::EquilibriumNotConverged {
            school_id: self.school_id,
            cohort_id: self.cohort_id,
            iterations: opts.max_iter,
            residual,
            last_iterate: sigma,
        })
    }
}

impl ClassGame {
    /// Newton step on `BR(sigma) - sigma`, or `None` if it leaves the unit
    /// cube, the system is singular, or it does not lower the residual.
    fn newton_step(&self, sigma: &[f64], s0: &[f64], s1: &[f64], mix: &[f64]) -> Option<Vec<f64>> {
        let k = self.len();
        let mut a = DMatrix::<f64>::identity(k, k);
        for i in 0..k {
            let slope =
                (1.0 - self.phi[i]) * s0[i] * (1.0 - s0[i]) + self.phi[i] * s1[i] * (1.0 - s1[i]);
            for j in 0..k {
                a[(i, j)] -= slope * self.interaction[i * k + j];
            }
        }
        let rhs = nalgebra::DVector::from_iterator(k, (0..k).map(|i| mix[i] - sigma[i]));
        let step = a.lu().solve(&rhs)?;
        let next: Vec<f64> = sigma.iter().zip(step.iter()).map(|(s, d)| s + d).collect();
        if next.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return None;
        }
        let old = sup_residual(sigma, mix);
        let (mut t0, mut t1, mut m) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
        self.best_response(&next, &mut t0, &mut t1, &mut m);
        (sup_residual(&next, &m) < old).then_some(next)
    }
}

fn sup_residual(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Converged beliefs of a [`ClassGame`], aligned with its present types.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPoint {
    pub sigma: Vec<f64>,
    pub sigma_b0: Vec<f64>,
    pub sigma_b1: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm of `BR(sigma) - sigma` at the last evaluated iterate.
    pub residual: f64,
}

/// Equilibrium of one classroom. Vectors are aligned with `types`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub school_id: u32,
    pub cohort_id: u32,
    pub types: Vec<usize>,
    pub sigma: Vec<f64>,
    pub sigma_b0: Vec<f64>,
    pub sigma_b1: Vec<f64>,
    pub phi: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub sup_step: f64,
    pub contraction_metric: f64,
    /// `contraction_metric < 4`; uniqueness is only certified strictly
    /// inside the bound.
    pub uniqueness_certified: bool,
}

impl EquilibriumResult {
    /// Belief about type `t`, if present in the class.
    pub fn sigma_of(&self, t: usize) -> Option<f64> {
        self.types
            .iter()
            .position(|&u| u == t)
            .map(|i| self.sigma[i])
    }

    pub fn phi_of(&self, t: usize) -> Option<f64> {
        self.types.iter().position(|&u| u == t).map(|i| self.phi[i])
    }

    /// Beliefs scattered into a full type-indexed vector (absent types 0).
    pub fn sigma_full(&self) -> [f64; NUM_TYPES] {
        let mut out = [0.0; NUM_TYPES];
        for (i, &t) in self.types.iter().enumerate() {
            out[t] = self.sigma[i];
        }
        out
    }

    fn from_fixed_point(game: &ClassGame, fp: FixedPoint) -> Self {
        let metric = game.contraction_metric();
        EquilibriumResult {
            school_id: game.school_id,
            cohort_id: game.cohort_id,
            types: game.types.clone(),
            sigma: fp.sigma,
            sigma_b0: fp.sigma_b0,
            sigma_b1: fp.sigma_b1,
            phi: game.phi.clone(),
            iterations: fp.iterations,
            converged: true,
            sup_step: fp.residual,
            contraction_metric: metric,
            uniqueness_certified: metric < CONTRACTION_BOUND,
        }
    }
}

/// Solves the Bayesian-Nash equilibrium of a classroom.
pub fn solve_equilibrium(
    teacher: &TeacherParams,
    student: &StudentParams,
    c: &Classroom,
    opts: &SolverOptions,
) -> Result<EquilibriumResult> {
    solve_equilibrium_from(teacher, student, c, opts, None)
}

/// As [`solve_equilibrium`], from an explicit starting point indexed by type.
pub fn solve_equilibrium_from(
    teacher: &TeacherParams,
    student: &StudentParams,
    c: &Classroom,
    opts: &SolverOptions,
    init: Option<&[f64; NUM_TYPES]>,
) -> Result<EquilibriumResult> {
    teacher.validate()?;
    student.validate()?;
    let game = ClassGame::for_classroom(teacher, student, c);
    let start: Option<Vec<f64>> = init.map(|s| game.types.iter().map(|&t| s[t]).collect());
    let fp = game.solve(opts, start.as_deref())?;
    Ok(EquilibriumResult::from_fixed_point(&game, fp))
}

/// Solves an already-built game; convenience for fractional compositions.
pub fn solve_game(game: &ClassGame, opts: &SolverOptions) -> Result<EquilibriumResult> {
    let fp = game.solve(opts, None)?;
    Ok(EquilibriumResult::from_fixed_point(game, fp))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionCheck {
    /// `metric <= 4`.
    pub holds: bool,
    /// `metric < 4`: the map is a strict contraction.
    pub strict: bool,
    pub metric: f64,
}

/// Weighted row sums of `|lambda|` over classmates, maximized over the
/// present types, compared against the bound 4.
pub fn contraction_check(student: &StudentParams, c: &Classroom) -> ContractionCheck {
    if c.size() <= 1 {
        return ContractionCheck {
            holds: true,
            strict: true,
            metric: 0.0,
        };
    }
    let counts = c.counts_f64();
    let metric = c
        .present_types()
        .into_iter()
        .map(|t| {
            let w = weights_from_counts(&counts, t);
            let row = &student.lambda[race_of(t)];
            (0..NUM_TYPES)
                .map(|u| row[race_of(u)].abs() * w[u])
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    ContractionCheck {
        holds: metric <= CONTRACTION_BOUND,
        strict: metric < CONTRACTION_BOUND,
        metric,
    }
}

/// Type-level gradient of the best-response map:
/// `J[t][t'] = sigma_t (1 - sigma_t) lambda_tt' w_tt'` for present types,
/// zero elsewhere.
pub fn jacobian_sigma(
    student: &StudentParams,
    c: &Classroom,
    sigma: &[f64; NUM_TYPES],
) -> DMatrix<f64> {
    let counts = c.counts_f64();
    let mut j = DMatrix::zeros(NUM_TYPES, NUM_TYPES);
    for t in c.present_types() {
        let w = weights_from_counts(&counts, t);
        let row = &student.lambda[race_of(t)];
        let v = sigma[t] * (1.0 - sigma[t]);
        for u in 0..NUM_TYPES {
            j[(t, u)] = v * row[race_of(u)] * w[u];
        }
    }
    j
}

/// Maximum absolute row sum.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
