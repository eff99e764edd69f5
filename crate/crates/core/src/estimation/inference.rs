use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{FitResult, StudentEstimator, StudentOptions, TeacherEstimator};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::model::{StudentParams, TeacherParams};

/// Information matrices with a larger condition number are reported as
/// singular.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    /// Per-coefficient standard errors; `None` when the information matrix
    /// is singular. Unidentified coefficients (no support in the data) get
    /// `None` entries.
    pub se: Option<Vec<Option<f64>>>,
    /// Condition number of the observed information on the identified
    /// coefficients.
    pub condition_number: f64,
}

/// Symmetrized central-difference Jacobian of `grad` at `x`, restricted to
/// the coordinates in `keep`.
pub fn hessian_of_gradient(
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    keep: &[usize],
) -> Result<DMatrix<f64>> {
    let m = keep.len();
    let mut h = DMatrix::zeros(m, m);
    for (col, &j) in keep.iter().enumerate() {
        let step = 1e-4 * x[j].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += step;
        xm[j] -= step;
        let gp = grad(&xp)?;
        let gm = grad(&xm)?;
        for (row, &i) in keep.iter().enumerate() {
            h[(row, col)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// `sqrt(diag((-H)^-1))` over the supported coefficients.
fn from_hessian(h: DMatrix<f64>, keep: &[usize], n: usize) -> StandardErrors {
    let info = -h;
    let eig = SymmetricEigen::new(info.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let condition_number = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition_number <= MAX_CONDITION) {
        return StandardErrors {
            se: None,
            condition_number,
        };
    }
    let Some(inv) = info.try_inverse() else {
        return StandardErrors {
            se: None,
            condition_number: f64::INFINITY,
        };
    };
    let mut se = vec![None; n];
    for (k, &j) in keep.iter().enumerate() {
        se[j] = Some(inv[(k, k)].max(0.0).sqrt());
    }
    StandardErrors {
        se: Some(se),
        condition_number,
    }
}

fn attach<P>(fit: &mut FitResult<P>, se: &StandardErrors) {
    fit.condition_number = Some(se.condition_number);
    if let Some(v) = &se.se {
        for (c, s) in fit.coefficients.iter_mut().zip(v) {
            c.se = *s;
        }
    } else {
        fit.notes.push(format!(
            "information matrix singular (condition number {:.3e}); standard errors unavailable",
            se.condition_number
        ));
    }
}

/// Standard errors of a first-step fit from the finite-difference Hessian
/// of the analytic gradient. Writes them into `fit`.
pub fn teacher_standard_errors(
    fit: &mut FitResult<TeacherParams>,
    data: &Dataset,
) -> Result<StandardErrors> {
    let est = TeacherEstimator::new(data)?;
    let x = est.pack(&fit.params);
    let keep: Vec<usize> = est
        .support()
        .iter()
        .enumerate()
        .filter_map(|(i, &s)| s.then_some(i))
        .collect();
    let h = hessian_of_gradient(|v| Ok(est.loglik_grad(v).1), &x, &keep)?;
    let out = from_hessian(h, &keep, x.len());
    attach(fit, &out);
    Ok(out)
}

/// Standard errors of a second-step fit, treating the teacher parameters
/// as known. Writes them into `fit`.
pub fn student_standard_errors(
    fit: &mut FitResult<StudentParams>,
    teacher: &TeacherParams,
    data: &Dataset,
    opts: &StudentOptions,
) -> Result<StandardErrors> {
    let mut est = StudentEstimator::new(data, teacher, opts)?;
    let x = est.pack(&fit.params);
    let keep: Vec<usize> = est
        .support()
        .iter()
        .enumerate()
        .filter_map(|(i, &s)| s.then_some(i))
        .collect();
    // warm starts at the estimate
    est.loglik_grad(&x)?;
    let h = hessian_of_gradient(|v| Ok(est.loglik_grad(v)?.1), &x, &keep)?;
    let out = from_hessian(h, &keep, x.len());
    attach(fit, &out);
    Ok(out)
}

/// Standard errors from any gradient of the total log-likelihood.
pub fn standard_errors(
    grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
) -> Result<StandardErrors> {
    let keep: Vec<usize> = (0..x.len()).collect();
    let h = hessian_of_gradient(grad, x, &keep)?;
    Ok(from_hessian(h, &keep, x.len()))
}
