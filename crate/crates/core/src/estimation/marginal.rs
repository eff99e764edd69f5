use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{sigmoid, solve_game, ClassGame, SolverOptions};
use crate::model::{
    covariate_names, race_of, race_weights, weights_from_counts, RaceMatrix, SchoolSystem,
    StudentParams, StudentType, TeacherParams, DEFAULT_ACHIEVER_LABEL, NUM_COVARIATES, NUM_TYPES,
};

/// Cohort pooled into the representative class when none is named.
pub const REPRESENTATIVE_COHORT: u32 = 2;

/// One large class standing in for the whole system: pooled counts and
/// count-weighted average fixed effects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeClass {
    pub cohort_id: u32,
    pub counts: [f64; NUM_TYPES],
    pub teacher_fe: f64,
    pub student_fe: f64,
}

/// Pools all classes of `cohort` (cohort 2 if present, otherwise the last
/// cohort) into one class.
pub fn representative_classroom(
    system: &SchoolSystem,
    teacher: &TeacherParams,
    student: &StudentParams,
    cohort: Option<u32>,
) -> Result<RepresentativeClass> {
    let cohorts = system.cohort_ids();
    let cohort_id = match cohort {
        Some(g) => g,
        None if cohorts.contains(&REPRESENTATIVE_COHORT) => REPRESENTATIVE_COHORT,
        None => *cohorts.last().ok_or(Error::EmptyDataset)?,
    };
    let mut counts = [0.0; NUM_TYPES];
    let (mut tfe, mut sfe, mut n) = (0.0, 0.0, 0.0);
    for c in system
        .classrooms
        .iter()
        .filter(|c| c.cohort_id == cohort_id)
    {
        let size = f64::from(c.size());
        for (a, b) in counts.iter_mut().zip(c.counts_f64()) {
            *a += b;
        }
        tfe += size * (teacher.cohort_effect(cohort_id) + teacher.school_effect(c.school_id));
        sfe += size * (student.cohort_effect(cohort_id) + student.school_effect(c.school_id));
        n += size;
    }
    if n == 0.0 {
        return Err(Error::InvalidInput(format!(
            "no classes in cohort {cohort_id}"
        )));
    }
    Ok(RepresentativeClass {
        cohort_id,
        counts,
        teacher_fe: tfe / n,
        student_fe: sfe / n,
    })
}

/// Change in the encouragement and coursework probabilities from switching
/// one characteristic on, averaged over the representative class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateEffect {
    pub covariate: String,
    /// `None` for rows that do not enter the teacher equation.
    pub teacher: Option<f64>,
    pub student: f64,
}

/// Covariate effects `Pr(. | x_k = 1) - Pr(. | x_k = 0)` in the
/// representative class. Each student keeps their own composition terms and
/// classmates' equilibrium beliefs; only the index contribution of `x_k`
/// changes. Race rows compare against White. The last row is the effect of
/// encouragement itself on coursework.
pub fn marginal_effects_covariate(
    rep: &RepresentativeClass,
    teacher: &TeacherParams,
    student: &StudentParams,
    achiever_label: Option<&str>,
    solver: &SolverOptions,
) -> Result<Vec<CovariateEffect>> {
    let game = ClassGame::from_counts(
        teacher,
        student,
        &rep.counts,
        rep.teacher_fe,
        rep.student_fe,
    );
    let eq = solve_game(&game, solver)?;
    let total: f64 = rep.counts.iter().sum();

    // teacher and student indices of each present type with x_k removed
    let rows: Vec<_> = game
        .types
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let x = StudentType::from_index(t).unwrap().covariates();
            let shares = race_weights(&weights_from_counts(&rep.counts, t));
            let comp: f64 = teacher.rho[race_of(t)]
                .iter()
                .zip(&shares)
                .map(|(r, s)| r * s)
                .sum();
            let u_teacher: f64 = dot(&x, &teacher.delta) + rep.teacher_fe + comp;
            let u_student: f64 = game.base[i] + game.social(i, &eq.sigma);
            (rep.counts[t] / total, x, u_teacher, u_student)
        })
        .collect();

    let prob = |ut: f64, us: f64| {
        let phi = sigmoid(ut);
        (
            phi,
            (1.0 - phi) * sigmoid(us) + phi * sigmoid(us + student.alpha),
        )
    };
    let names = covariate_names(achiever_label.unwrap_or(DEFAULT_ACHIEVER_LABEL));
    let mut out = Vec::new();
    for k in 1..NUM_COVARIATES {
        // race dummies are mutually exclusive
        let off: &[usize] = match k {
            1 | 2 => &[1, 2],
            _ => &[k],
        };
        let (mut et, mut es) = (0.0, 0.0);
        for (w, x, ut, us) in &rows {
            let strip =
                |coef: &[f64; NUM_COVARIATES]| off.iter().map(|&j| x[j] * coef[j]).sum::<f64>();
            let ut0 = ut - strip(&teacher.delta);
            let us0 = us - strip(&student.beta);
            let (p1, s1) = prob(ut0 + teacher.delta[k], us0 + student.beta[k]);
            let (p0, s0) = prob(ut0, us0);
            et += w * (p1 - p0);
            es += w * (s1 - s0);
        }
        out.push(CovariateEffect {
            covariate: names[k].clone(),
            teacher: Some(et),
            student: es,
        });
    }
    let es: f64 = rows
        .iter()
        .map(|(w, _, _, us)| w * (sigmoid(us + student.alpha) - sigmoid(*us)))
        .sum();
    out.push(CovariateEffect {
        covariate: "Teacher encouraged for college".to_string(),
        teacher: None,
        student: es,
    });
    Ok(out)
}

/// Composition effects `p (1 - p) coef` per race pair, where `p` is the
/// encouragement probability (with `rho`) or the coursework probability
/// (with `lambda`).
pub fn marginal_effects_composition(level: f64, coef: &RaceMatrix) -> Result<RaceMatrix> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidInput(format!(
            "probability {level} outside [0, 1]"
        )));
    }
    let v = level * (1.0 - level);
    Ok(coef.map(|row| row.map(|c| v * c)))
}

fn dot(a: &[f64; NUM_COVARIATES], b: &[f64; NUM_COVARIATES]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
