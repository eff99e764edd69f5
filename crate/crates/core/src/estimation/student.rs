use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{binomial_ll, covariate_labels, Coefficient, FitResult, Layout, PROB_CLAMP};
use crate::dataset::{Cell, Dataset};
use crate::error::{Error, Result};
use crate::game::{sigmoid, teacher_index_from_counts, ClassGame, FixedPoint, SolverOptions};
use crate::model::{
    race_of, weights_from_counts, StudentParams, StudentType, TeacherParams, NUM_COVARIATES,
    NUM_RACES,
};
use crate::optim::{minimize, BfgsOptions, Objective};

const ALPHA_SLOT: usize = NUM_COVARIATES;
const N_GLOBAL: usize = NUM_COVARIATES + 1 + NUM_RACES * NUM_RACES;

/// Flat slot of `lambda[r][c]`, column-major (`lambda_WW, lambda_BW, ...`).
fn lambda_slot(r: usize, c: usize) -> usize {
    ALPHA_SLOT + 1 + c * NUM_RACES + r
}

/// Which coursework probability enters the likelihood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodVariant {
    /// The equilibrium mixture `sigma = (1 - phi) s_0 + phi s_1`, which does
    /// not use the student's observed `b`.
    #[default]
    Marginal,
    /// `s_b` evaluated at each student's observed encouragement.
    Conditional,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Implicit-function gradient through the fixed point (one adjoint
    /// solve per class).
    #[default]
    Analytic,
    /// Central differences with the given step per coordinate.
    FiniteDifference { step: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudentOptions {
    pub bfgs: BfgsOptions,
    pub solver: SolverOptions,
    pub variant: LikelihoodVariant,
    pub gradient: GradientMode,
    pub start: Option<StudentParams>,
    pub achiever_label: Option<String>,
}

impl Default for StudentOptions {
    fn default() -> Self {
        StudentOptions {
            bfgs: BfgsOptions::default(),
            solver: SolverOptions {
                tol: 1e-12,
                ..SolverOptions::default()
            },
            variant: LikelihoodVariant::Marginal,
            gradient: GradientMode::Analytic,
            start: None,
            achiever_label: None,
        }
    }
}

/// Coursework log-likelihood at `(teacher, student)`, marginal variant.
pub fn student_loglik(
    student: &StudentParams,
    teacher: &TeacherParams,
    data: &Dataset,
) -> Result<f64> {
    let opts = StudentOptions::default();
    student_loglik_with(student, teacher, data, opts.variant, &opts.solver)
}

/// Coursework log-likelihood with an explicit variant and solver settings.
pub fn student_loglik_with(
    student: &StudentParams,
    teacher: &TeacherParams,
    data: &Dataset,
    variant: LikelihoodVariant,
    solver: &SolverOptions,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    teacher.validate()?;
    student.validate()?;
    let per_class: Vec<Result<f64>> = data
        .classrooms()
        .par_iter()
        .zip(&data.cells)
        .map(|(c, cells)| {
            let game = ClassGame::for_classroom(teacher, student, c);
            let fp = game.solve(solver, None)?;
            let cells: Vec<Cell> = game.types.iter().map(|&t| cells[t]).collect();
            let mut clamped = 0;
            Ok(cell_loglik(&fp, &cells, variant, &mut clamped))
        })
        .collect();
    let mut total = 0.0;
    for ll in per_class {
        total += ll?;
    }
    Ok(total)
}

fn cell_loglik(
    fp: &FixedPoint,
    cells: &[Cell],
    variant: LikelihoodVariant,
    clamped: &mut usize,
) -> f64 {
    let mut ll = 0.0;
    for (i, cell) in cells.iter().enumerate() {
        match variant {
            LikelihoodVariant::Marginal => {
                ll += binomial_ll(cell.took_prep, cell.n, fp.sigma[i], clamped);
            }
            LikelihoodVariant::Conditional => {
                let b1 = cell.encouraged;
                let b1a1 = cell.encouraged_took_prep;
                ll += binomial_ll(cell.took_prep - b1a1, cell.n - b1, fp.sigma_b0[i], clamped);
                ll += binomial_ll(b1a1, b1, fp.sigma_b1[i], clamped);
            }
        }
    }
    ll
}

struct StudentClass {
    school_id: u32,
    cohort_id: u32,
    cohort_slot: Option<usize>,
    school_slot: Option<usize>,
    types: Vec<usize>,
    x: Vec<[f64; NUM_COVARIATES]>,
    race: Vec<usize>,
    /// Row-major `k x k` classmate weights over present types.
    w: Vec<f64>,
    phi: Vec<f64>,
    cells: Vec<Cell>,
}

struct ClassEval {
    ll: f64,
    grad: [f64; N_GLOBAL],
    grad_fe: f64,
    sigma: Vec<f64>,
}

/// Second-step objective: negative mean coursework log-likelihood over a
/// flat parameter vector, with the teacher probabilities held fixed.
pub struct StudentEstimator<'a> {
    _data: std::marker::PhantomData<&'a Dataset>,
    layout: Layout,
    classes: Vec<StudentClass>,
    n_students: f64,
    solver: SolverOptions,
    variant: LikelihoodVariant,
    gradient: GradientMode,
    warm: Vec<Vec<f64>>,
    failed: BTreeSet<(u32, u32)>,
}

impl<'a> StudentEstimator<'a> {
    pub fn new(data: &'a Dataset, teacher: &TeacherParams, opts: &StudentOptions) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        teacher.validate()?;
        let layout = Layout::new(N_GLOBAL, &data.system);
        let classes: Vec<StudentClass> = data
            .classrooms()
            .iter()
            .zip(&data.cells)
            .map(|(c, cells)| {
                let counts = c.counts_f64();
                let types = c.present_types();
                let k = types.len();
                let mut w = vec![0.0; k * k];
                for (i, &t) in types.iter().enumerate() {
                    let wt = weights_from_counts(&counts, t);
                    for (j, &u) in types.iter().enumerate() {
                        w[i * k + j] = wt[u];
                    }
                }
                let tfe = teacher.cohort_effect(c.cohort_id) + teacher.school_effect(c.school_id);
                StudentClass {
                    school_id: c.school_id,
                    cohort_id: c.cohort_id,
                    cohort_slot: layout.cohort_slot(c.cohort_id),
                    school_slot: layout.school_slot(c.school_id),
                    x: types
                        .iter()
                        .map(|&t| StudentType::from_index(t).unwrap().covariates())
                        .collect(),
                    race: types.iter().map(|&t| race_of(t)).collect(),
                    phi: types
                        .iter()
                        .map(|&t| sigmoid(teacher_index_from_counts(teacher, &counts, t, tfe)))
                        .collect(),
                    cells: types.iter().map(|&t| cells[t]).collect(),
                    w,
                    types,
                }
            })
            .collect();
        let warm = vec![Vec::new(); classes.len()];
        Ok(StudentEstimator {
            _data: std::marker::PhantomData,
            layout,
            classes,
            n_students: data.len() as f64,
            solver: opts.solver,
            variant: opts.variant,
            gradient: opts.gradient,
            warm,
            failed: BTreeSet::new(),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self, achiever_label: Option<&str>) -> Vec<String> {
        let mut names = covariate_labels(achiever_label);
        names.push("Teacher encouraged for college".to_string());
        for c in ["W", "B", "H"] {
            for r in ["W", "B", "H"] {
                names.push(format!("lambda_{r}{c}"));
            }
        }
        names.extend(self.layout.fe_names("kappa", "gamma"));
        names
    }

    pub fn pack(&self, p: &StudentParams) -> Vec<f64> {
        let mut v = vec![0.0; self.layout.len()];
        v[..NUM_COVARIATES].copy_from_slice(&p.beta);
        v[ALPHA_SLOT] = p.alpha;
        for r in 0..NUM_RACES {
            for c in 0..NUM_RACES {
                v[lambda_slot(r, c)] = p.lambda[r][c];
            }
        }
        for &g in &self.layout.cohorts {
            if let Some(k) = self.layout.cohort_slot(g) {
                v[k] = p.cohort_effect(g);
            }
        }
        for &s in &self.layout.schools {
            if let Some(k) = self.layout.school_slot(s) {
                v[k] = p.school_effect(s);
            }
        }
        v
    }

    pub fn unpack(&self, v: &[f64]) -> StudentParams {
        let mut p = StudentParams::zero();
        p.beta.copy_from_slice(&v[..NUM_COVARIATES]);
        p.alpha = v[ALPHA_SLOT];
        for r in 0..NUM_RACES {
            for c in 0..NUM_RACES {
                p.lambda[r][c] = v[lambda_slot(r, c)];
            }
        }
        for &g in &self.layout.cohorts {
            p.kappa
                .insert(g, self.layout.cohort_slot(g).map_or(0.0, |k| v[k]));
        }
        for &s in &self.layout.schools {
            p.gamma
                .insert(s, self.layout.school_slot(s).map_or(0.0, |k| v[k]));
        }
        p
    }

    /// Whether each coefficient has any variation in the data to load on.
    pub fn support(&self) -> Vec<bool> {
        let mut sup = vec![false; self.layout.len()];
        sup[ALPHA_SLOT] = true;
        for cl in &self.classes {
            for s in [cl.cohort_slot, cl.school_slot].into_iter().flatten() {
                sup[s] = true;
            }
            let k = cl.types.len();
            for i in 0..k {
                for (kk, x) in cl.x[i].iter().enumerate() {
                    sup[kk] |= *x != 0.0;
                }
                for j in 0..k {
                    if cl.w[i * k + j] > 0.0 {
                        sup[lambda_slot(cl.race[i], cl.race[j])] = true;
                    }
                }
            }
        }
        sup
    }

    /// Classes whose equilibrium failed at some evaluated candidate.
    pub fn failed_classes(&self) -> Vec<(u32, u32)> {
        self.failed.iter().copied().collect()
    }

    /// Largest contraction metric over classes at `v`.
    pub fn max_contraction_metric(&self, v: &[f64]) -> f64 {
        self.classes
            .iter()
            .map(|cl| self.game(cl, v).contraction_metric())
            .fold(0.0, f64::max)
    }

    fn game(&self, cl: &StudentClass, v: &[f64]) -> ClassGame {
        let k = cl.types.len();
        let fe = cl.cohort_slot.map_or(0.0, |s| v[s]) + cl.school_slot.map_or(0.0, |s| v[s]);
        let base =
            cl.x.iter()
                .map(|x| {
                    fe + x
                        .iter()
                        .zip(&v[..NUM_COVARIATES])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .collect();
        let mut interaction = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                interaction[i * k + j] = v[lambda_slot(cl.race[i], cl.race[j])] * cl.w[i * k + j];
            }
        }
        ClassGame {
            school_id: cl.school_id,
            cohort_id: cl.cohort_id,
            types: cl.types.clone(),
            phi: cl.phi.clone(),
            base,
            alpha: v[ALPHA_SLOT],
            interaction,
        }
    }

    fn solve_class(
        &self,
        cl: &StudentClass,
        v: &[f64],
        warm: &[f64],
    ) -> Result<(ClassGame, FixedPoint)> {
        let game = self.game(cl, v);
        let init = (warm.len() == cl.types.len()).then_some(warm);
        let fp = game.solve(&self.solver, init)?;
        Ok((game, fp))
    }

    fn class_loglik(
        &self,
        cl: &StudentClass,
        v: &[f64],
        warm: &[f64],
    ) -> Result<(f64, usize, Vec<f64>)> {
        let (_, fp) = self.solve_class(cl, v, warm)?;
        let mut clamped = 0;
        let ll = cell_loglik(&fp, &cl.cells, self.variant, &mut clamped);
        Ok((ll, clamped, fp.sigma))
    }

    /// Log-likelihood of one class plus its implicit-function gradient.
    fn class_analytic(&self, cl: &StudentClass, v: &[f64], warm: &[f64]) -> Result<ClassEval> {
        let (game, fp) = self.solve_class(cl, v, warm)?;
        let k = cl.types.len();
        let mut clamped = 0;
        let ll = cell_loglik(&fp, &cl.cells, self.variant, &mut clamped);

        let clampp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let mut vdir = vec![0.0; k];
        let mut valpha = vec![0.0; k];
        // direct sensitivity of the likelihood to u_i, to alpha, and to sigma
        let mut c = vec![0.0; k];
        let mut c_alpha = 0.0;
        let mut g = vec![0.0; k];
        for i in 0..k {
            let (s0, s1, phi) = (fp.sigma_b0[i], fp.sigma_b1[i], cl.phi[i]);
            vdir[i] = (1.0 - phi) * s0 * (1.0 - s0) + phi * s1 * (1.0 - s1);
            valpha[i] = phi * s1 * (1.0 - s1);
            let cell = &cl.cells[i];
            match self.variant {
                LikelihoodVariant::Marginal => {
                    let s = clampp(fp.sigma[i]);
                    g[i] = f64::from(cell.took_prep) / s
                        - f64::from(cell.n - cell.took_prep) / (1.0 - s);
                }
                LikelihoodVariant::Conditional => {
                    let b1 = f64::from(cell.encouraged);
                    let b1a1 = f64::from(cell.encouraged_took_prep);
                    let b0 = f64::from(cell.n) - b1;
                    let b0a1 = f64::from(cell.took_prep) - b1a1;
                    let r1 = b1a1 - b1 * s1;
                    c[i] = (b0a1 - b0 * s0) + r1;
                    c_alpha += r1;
                }
            }
        }
        // (I - A^T V) mu = g + A^T c
        let a = DMatrix::from_row_slice(k, k, &game.interaction);
        let mut m = DMatrix::identity(k, k);
        for i in 0..k {
            for j in 0..k {
                m[(i, j)] -= a[(j, i)] * vdir[j];
            }
        }
        let rhs = DVector::from_vec(g) + a.transpose() * DVector::from_vec(c.clone());
        let mu = m.lu().solve(&rhs).ok_or_else(|| {
            Error::NonFinite(format!(
                "singular fixed-point Jacobian in class school={} cohort={}",
                cl.school_id, cl.cohort_id
            ))
        })?;

        let mut grad = [0.0; N_GLOBAL];
        let mut grad_fe = 0.0;
        grad[ALPHA_SLOT] = c_alpha;
        for i in 0..k {
            let d = c[i] + mu[i] * vdir[i];
            for (gk, xk) in grad.iter_mut().zip(&cl.x[i]) {
                *gk += d * xk;
            }
            grad_fe += d;
            grad[ALPHA_SLOT] += mu[i] * valpha[i];
            let mut feat = [0.0; NUM_RACES];
            for j in 0..k {
                feat[cl.race[j]] += cl.w[i * k + j] * fp.sigma[j];
            }
            for (rc, f) in feat.iter().enumerate() {
                grad[lambda_slot(cl.race[i], rc)] += d * f;
            }
        }
        Ok(ClassEval {
            ll,
            grad,
            grad_fe,
            sigma: fp.sigma,
        })
    }

    /// Total log-likelihood and number of clamped terms.
    pub fn loglik(&mut self, v: &[f64]) -> Result<(f64, usize)> {
        let results: Vec<Result<(f64, usize, Vec<f64>)>> = self
            .classes
            .par_iter()
            .zip(&self.warm)
            .map(|(cl, warm)| self.class_loglik(cl, v, warm))
            .collect();
        let mut ll = 0.0;
        let mut clamped = 0;
        let mut first_err = None;
        for (r, cl) in results.into_iter().zip(&self.classes) {
            match r {
                Ok((l, k, _)) => {
                    ll += l;
                    clamped += k;
                }
                Err(e) => {
                    self.failed.insert((cl.school_id, cl.cohort_id));
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok((ll, clamped)),
        }
    }

    /// Total log-likelihood and gradient; updates the warm starts.
    pub fn loglik_grad(&mut self, v: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.gradient {
            GradientMode::Analytic => self.analytic(v),
            GradientMode::FiniteDifference { step } => self.finite_difference(v, step),
        }
    }

    fn analytic(&mut self, v: &[f64]) -> Result<(f64, Vec<f64>)> {
        let results: Vec<Result<ClassEval>> = self
            .classes
            .par_iter()
            .zip(&self.warm)
            .map(|(cl, warm)| self.class_analytic(cl, v, warm))
            .collect();
        let mut ll = 0.0;
        let mut grad = vec![0.0; self.layout.len()];
        let mut new_warm = Vec::with_capacity(self.classes.len());
        for (r, cl) in results.into_iter().zip(&self.classes) {
            let ev = r.inspect_err(|_| {
                self.failed.insert((cl.school_id, cl.cohort_id));
            })?;
            ll += ev.ll;
            for (a, b) in grad.iter_mut().zip(ev.grad.iter()) {
                *a += b;
            }
            for s in [cl.cohort_slot, cl.school_slot].into_iter().flatten() {
                grad[s] += ev.grad_fe;
            }
            new_warm.push(ev.sigma);
        }
        self.warm = new_warm;
        Ok((ll, grad))
    }

    fn finite_difference(&mut self, v: &[f64], step: f64) -> Result<(f64, Vec<f64>)> {
        let base: Vec<Result<(f64, usize, Vec<f64>)>> = self
            .classes
            .par_iter()
            .zip(&self.warm)
            .map(|(cl, warm)| self.class_loglik(cl, v, warm))
            .collect();
        let mut ll = 0.0;
        let mut new_warm = Vec::with_capacity(self.classes.len());
        for (r, cl) in base.into_iter().zip(&self.classes) {
            let (l, _, s) = r.inspect_err(|_| {
                self.failed.insert((cl.school_id, cl.cohort_id));
            })?;
            ll += l;
            new_warm.push(s);
        }
        self.warm = new_warm;

        let n = self.layout.len();
        let mut affected: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (ci, cl) in self.classes.iter().enumerate() {
            for s in [cl.cohort_slot, cl.school_slot].into_iter().flatten() {
                affected[s].push(ci);
            }
        }
        let all: Vec<usize> = (0..self.classes.len()).collect();
        let this = &*self;
        let grad: Vec<Result<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let classes = if j < N_GLOBAL { &all } else { &affected[j] };
                let mut vp = v.to_vec();
                let mut vm = v.to_vec();
                vp[j] += step;
                vm[j] -= step;
                let mut diff = 0.0;
                for &ci in classes {
                    let cl = &this.classes[ci];
                    let up = this.class_loglik(cl, &vp, &this.warm[ci])?.0;
                    let dn = this.class_loglik(cl, &vm, &this.warm[ci])?.0;
                    diff += up - dn;
                }
                Ok(diff / (2.0 * step))
            })
            .collect();
        let grad = grad.into_iter().collect::<Result<Vec<f64>>>()?;
        Ok((ll, grad))
    }

    /// Central-difference gradient at `v` with the given step, independent
    /// of the configured gradient mode.
    pub fn fd_gradient(&mut self, v: &[f64], step: f64) -> Result<Vec<f64>> {
        let mode = self.gradient;
        self.gradient = GradientMode::FiniteDifference { step };
        let out = self.loglik_grad(v).map(|(_, g)| g);
        self.gradient = mode;
        out
    }
}

impl Objective for StudentEstimator<'_> {
    fn value(&mut self, x: &[f64]) -> Result<f64> {
        match self.loglik(x) {
            Ok((ll, _)) => Ok(-ll / self.n_students),
            // an unsolvable candidate is rejected by the line search
            Err(Error::EquilibriumNotConverged { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    fn value_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (ll, g) = self.loglik_grad(x)?;
        Ok((
            -ll / self.n_students,
            g.into_iter().map(|v| -v / self.n_students).collect(),
        ))
    }
}

/// Fits the student coursework equation with the nested fixed point, taking
/// the first-step teacher parameters as given.
pub fn estimate_student(
    data: &Dataset,
    teacher: &TeacherParams,
    opts: &StudentOptions,
) -> Result<FitResult<StudentParams>> {
    let mut est = StudentEstimator::new(data, teacher, opts)?;
    let names = est.names(opts.achiever_label.as_deref());
    let x0 = match &opts.start {
        Some(p) => est.pack(p),
        None => {
            let rate = data.records.iter().filter(|r| r.took_prep).count() as f64 / est.n_students;
            let rate = rate.clamp(1e-6, 1.0 - 1e-6);
            let mut v = vec![0.0; est.layout.len()];
            v[0] = (rate / (1.0 - rate)).ln();
            v
        }
    };
    let res = minimize(&mut est, &x0, &opts.bfgs)?;
    // warm-started, so that the equilibrium is the one the optimizer tracked
    let (loglik, clamped) = est.loglik(&res.x)?;
    let params = est.unpack(&res.x);
    let metric = est.max_contraction_metric(&res.x);

    let mut notes = vec![
        format!("max contraction metric over classes at the estimate: {metric:.6}"),
        "standard errors do not correct for first-step estimation noise".to_string(),
    ];
    if metric >= crate::game::CONTRACTION_BOUND {
        notes.push("contraction bound not met: equilibrium uniqueness not certified".to_string());
    }
    let failed = est.failed_classes();
    if !failed.is_empty() {
        notes.push(format!(
            "equilibrium failed at some candidates in classes {failed:?}"
        ));
    }
    if !res.converged() {
        notes.push(format!(
            "optimizer stopped with status {:?}; parameters are the best iterate",
            res.status
        ));
    }
    Ok(FitResult {
        params,
        coefficients: names
            .iter()
            .zip(&res.x)
            .map(|(n, &v)| Coefficient {
                name: n.clone(),
                estimate: v,
                se: None,
            })
            .collect(),
        loglik,
        gradient_norm: res.grad_norm,
        iterations: res.iterations,
        converged: res.converged(),
        n_students: data.len(),
        clamped_evaluations: clamped,
        condition_number: None,
        notes,
    })
}
