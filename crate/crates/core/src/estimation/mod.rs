//! Two-step maximum likelihood.
//!
//! Step one fits the teacher logit on observed encouragement. Step two holds
//! the fitted teacher probabilities fixed and maximizes the coursework
//! likelihood, solving every class's equilibrium at each candidate
//! parameter vector (nested fixed point).

mod inference;
mod marginal;
mod student;
mod teacher;

pub use inference::{
    hessian_of_gradient, standard_errors, student_standard_errors, teacher_standard_errors,
    StandardErrors, MAX_CONDITION,
};
pub use marginal::{
    marginal_effects_composition, marginal_effects_covariate, representative_classroom,
    CovariateEffect, RepresentativeClass,
};
pub use student::{
    estimate_student, student_loglik, student_loglik_with, GradientMode, LikelihoodVariant,
    StudentEstimator, StudentOptions,
};
pub use teacher::{estimate_teacher, teacher_loglik, TeacherEstimator, TeacherOptions};

use serde::{Deserialize, Serialize};

use crate::model::{covariate_names, SchoolSystem, DEFAULT_ACHIEVER_LABEL};

/// Probabilities inside log-likelihoods are clamped to `[EPS, 1 - EPS]`.
pub const PROB_CLAMP: f64 = 1e-12;

/// `ln(clamp(p))`, bumping `clamped` when the clamp binds.
#[inline]
pub(crate) fn clamped_ln(p: f64, clamped: &mut usize) -> f64 {
    if p < PROB_CLAMP {
        *clamped += 1;
        PROB_CLAMP.ln()
    } else {
        p.ln()
    }
}

/// Bernoulli log-likelihood of `ones` successes out of `n` at probability `p`.
#[inline]
pub(crate) fn binomial_ll(ones: u32, n: u32, p: f64, clamped: &mut usize) -> f64 {
    let mut ll = 0.0;
    if ones > 0 {
        ll += f64::from(ones) * clamped_ln(p, clamped);
    }
    if n > ones {
        ll += f64::from(n - ones) * clamped_ln(1.0 - p, clamped);
    }
    ll
}

/// Positions of free parameters in a flat vector:
/// `[global coefficients | cohort effects | school effects]`. The first
/// cohort and first school are the normalized references and have no slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub n_global: usize,
    pub cohorts: Vec<u32>,
    pub schools: Vec<u32>,
}

impl Layout {
    pub fn new(n_global: usize, system: &SchoolSystem) -> Self {
        Layout {
            n_global,
            cohorts: system.cohort_ids(),
            schools: system.school_ids(),
        }
    }

    pub fn len(&self) -> usize {
        self.n_global + self.cohorts.len().saturating_sub(1) + self.schools.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cohort_slot(&self, cohort_id: u32) -> Option<usize> {
        let pos = self.cohorts.binary_search(&cohort_id).ok()?;
        (pos > 0).then(|| self.n_global + pos - 1)
    }

    pub fn school_slot(&self, school_id: u32) -> Option<usize> {
        let pos = self.schools.binary_search(&school_id).ok()?;
        (pos > 0).then(|| self.n_global + self.cohorts.len().saturating_sub(1) + pos - 1)
    }

    pub(crate) fn fe_names(&self, cohort_sym: &str, school_sym: &str) -> Vec<String> {
        let mut names = Vec::new();
        for id in self.cohorts.iter().skip(1) {
            names.push(format!("{cohort_sym}[cohort={id}]"));
        }
        for id in self.schools.iter().skip(1) {
            names.push(format!("{school_sym}[school={id}]"));
        }
        names
    }
}

pub(crate) fn covariate_labels(achiever_label: Option<&str>) -> Vec<String> {
    covariate_names(achiever_label.unwrap_or(DEFAULT_ACHIEVER_LABEL)).to_vec()
}

/// One named coefficient of a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
}

/// Outcome of one estimation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult<P> {
    pub params: P,
    /// Flat coefficient list with Table-style row labels; normalized
    /// effects are not listed.
    pub coefficients: Vec<Coefficient>,
    /// Total log-likelihood.
    pub loglik: f64,
    /// Sup-norm of the gradient of the per-student average log-likelihood.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_students: usize,
    /// Likelihood terms where the probability clamp was active.
    pub clamped_evaluations: usize,
    /// Condition number of the observed information, when computed.
    pub condition_number: Option<f64>,
    pub notes: Vec<String>,
}

impl<P> FitResult<P> {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}
