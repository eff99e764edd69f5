use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{binomial_ll, covariate_labels, Coefficient, FitResult, Layout};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::game::{sigmoid, teacher_index_from_counts};
use crate::model::{
    race_of, race_weights, weights_from_counts, StudentType, TeacherParams, NUM_COVARIATES,
    NUM_RACES,
};
use crate::optim::{minimize, BfgsOptions, Objective};

const N_GLOBAL: usize = NUM_COVARIATES + 6;
/// Coefficient magnitude treated as divergence to +-infinity.
const DIVERGENCE: f64 = 20.0;

/// Flat slot of `rho[r][c]` for the free columns c in {Black, Hispanic}.
fn rho_slot(r: usize, c: usize) -> usize {
    NUM_COVARIATES + (c - 1) * NUM_RACES + r
}

/// Sum over students of the encouragement log-likelihood.
pub fn teacher_loglik(teacher: &TeacherParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    teacher.validate()?;
    let mut clamped = 0;
    let mut total = 0.0;
    for (c, cells) in data.classrooms().iter().zip(&data.cells) {
        let counts = c.counts_f64();
        let fe = teacher.cohort_effect(c.cohort_id) + teacher.school_effect(c.school_id);
        for t in c.present_types() {
            let phi = sigmoid(teacher_index_from_counts(teacher, &counts, t, fe));
            total += binomial_ll(cells[t].encouraged, cells[t].n, phi, &mut clamped);
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TeacherOptions {
    pub bfgs: BfgsOptions,
    pub start: Option<TeacherParams>,
    pub achiever_label: Option<String>,
}

struct Item {
    x: [f64; NUM_COVARIATES],
    race: usize,
    shares: [f64; NUM_RACES],
    n: u32,
    ones: u32,
}

struct ClassItems {
    cohort_slot: Option<usize>,
    school_slot: Option<usize>,
    items: Vec<Item>,
}

/// First-step objective on a dataset: negative mean log-likelihood over a
/// flat parameter vector with an analytic gradient.
pub struct TeacherEstimator<'a> {
    data: &'a Dataset,
    layout: Layout,
    classes: Vec<ClassItems>,
    n_students: f64,
}

impl<'a> TeacherEstimator<'a> {
    pub fn new(data: &'a Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let layout = Layout::new(N_GLOBAL, &data.system);
        let classes = data
            .classrooms()
            .iter()
            .zip(&data.cells)
            .map(|(c, cells)| {
                let counts = c.counts_f64();
                ClassItems {
                    cohort_slot: layout.cohort_slot(c.cohort_id),
                    school_slot: layout.school_slot(c.school_id),
                    items: c
                        .present_types()
                        .into_iter()
                        .map(|t| Item {
                            x: StudentType::from_index(t).unwrap().covariates(),
                            race: race_of(t),
                            shares: race_weights(&weights_from_counts(&counts, t)),
                            n: cells[t].n,
                            ones: cells[t].encouraged,
                        })
                        .collect(),
                }
            })
            .collect();
        Ok(TeacherEstimator {
            data,
            layout,
            classes,
            n_students: data.len() as f64,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self, achiever_label: Option<&str>) -> Vec<String> {
        let mut names = covariate_labels(achiever_label);
        for c in ["B", "H"] {
            for r in ["W", "B", "H"] {
                names.push(format!("rho_{r}{c}"));
            }
        }
        names.extend(self.layout.fe_names("xi", "zeta"));
        names
    }

    pub fn pack(&self, p: &TeacherParams) -> Vec<f64> {
        let mut v = vec![0.0; self.layout.len()];
        v[..NUM_COVARIATES].copy_from_slice(&p.delta);
        for r in 0..NUM_RACES {
            for c in 1..NUM_RACES {
                v[rho_slot(r, c)] = p.rho[r][c];
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

    pub fn unpack(&self, v: &[f64]) -> TeacherParams {
        let mut p = TeacherParams::zero();
        p.delta.copy_from_slice(&v[..NUM_COVARIATES]);
        for r in 0..NUM_RACES {
            for c in 1..NUM_RACES {
                p.rho[r][c] = v[rho_slot(r, c)];
            }
        }
        for &g in &self.layout.cohorts {
            p.xi.insert(g, self.layout.cohort_slot(g).map_or(0.0, |k| v[k]));
        }
        for &s in &self.layout.schools {
            p.zeta
                .insert(s, self.layout.school_slot(s).map_or(0.0, |k| v[k]));
        }
        p
    }

    /// Whether each coefficient has any variation in the data to load on.
    pub fn support(&self) -> Vec<bool> {
        let mut sup = vec![false; self.layout.len()];
        for cl in &self.classes {
            for s in [cl.cohort_slot, cl.school_slot].into_iter().flatten() {
                sup[s] = true;
            }
            for it in &cl.items {
                for k in 0..NUM_COVARIATES {
                    sup[k] |= it.x[k] != 0.0;
                }
                for c in 1..NUM_RACES {
                    sup[rho_slot(it.race, c)] |= it.shares[c] > 0.0;
                }
            }
        }
        sup
    }

    /// Total log-likelihood, its gradient, and the number of clamped terms.
    pub fn loglik_grad(&self, v: &[f64]) -> (f64, Vec<f64>, usize) {
        let per_class: Vec<(f64, [f64; N_GLOBAL], f64, usize)> = self
            .classes
            .par_iter()
            .map(|cl| {
                let fe =
                    cl.cohort_slot.map_or(0.0, |k| v[k]) + cl.school_slot.map_or(0.0, |k| v[k]);
                let mut ll = 0.0;
                let mut g = [0.0; N_GLOBAL];
                let mut g_fe = 0.0;
                let mut clamped = 0;
                for it in &cl.items {
                    let mut idx = fe;
                    for k in 0..NUM_COVARIATES {
                        idx += it.x[k] * v[k];
                    }
                    for c in 1..NUM_RACES {
                        idx += v[rho_slot(it.race, c)] * it.shares[c];
                    }
                    let phi = sigmoid(idx);
                    ll += binomial_ll(it.ones, it.n, phi, &mut clamped);
                    let resid = f64::from(it.ones) - f64::from(it.n) * phi;
                    for k in 0..NUM_COVARIATES {
                        g[k] += resid * it.x[k];
                    }
                    for c in 1..NUM_RACES {
                        g[rho_slot(it.race, c)] += resid * it.shares[c];
                    }
                    g_fe += resid;
                }
                (ll, g, g_fe, clamped)
            })
            .collect();
        let mut grad = vec![0.0; self.layout.len()];
        let mut ll = 0.0;
        let mut clamped = 0;
        for ((l, g, g_fe, k), cl) in per_class.iter().zip(&self.classes) {
            ll += l;
            clamped += k;
            for (a, b) in grad.iter_mut().zip(g.iter()) {
                *a += b;
            }
            if let Some(s) = cl.cohort_slot {
                grad[s] += g_fe;
            }
            if let Some(s) = cl.school_slot {
                grad[s] += g_fe;
            }
        }
        (ll, grad, clamped)
    }

    /// Groups of students whose outcomes are all identical make the
    /// matching coefficient run off to infinity.
    fn separation_precheck(&self, names: &[String]) -> Result<()> {
        let (ones, n) = self
            .data
            .cells
            .iter()
            .flatten()
            .fold((0u64, 0u64), |(o, n), c| {
                (o + u64::from(c.encouraged), n + u64::from(c.n))
            });
        if ones == 0 || ones == n {
            return Err(Error::Separation {
                coefficient: names[0].clone(),
            });
        }
        let mut by_slot = vec![(0u64, 0u64); self.layout.len()];
        for (cl, cells) in self.classes.iter().zip(&self.data.cells) {
            let (o, m) = cells.iter().fold((0u64, 0u64), |(o, m), c| {
                (o + u64::from(c.encouraged), m + u64::from(c.n))
            });
            for s in [cl.cohort_slot, cl.school_slot].into_iter().flatten() {
                by_slot[s].0 += o;
                by_slot[s].1 += m;
            }
        }
        for (slot, &(o, m)) in by_slot.iter().enumerate().skip(N_GLOBAL) {
            if m > 0 && (o == 0 || o == m) {
                return Err(Error::Separation {
                    coefficient: names[slot].clone(),
                });
            }
        }
        Ok(())
    }
}

impl Objective for TeacherEstimator<'_> {
    fn value(&mut self, x: &[f64]) -> Result<f64> {
        Ok(-self.loglik_grad(x).0 / self.n_students)
    }

    fn value_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (ll, g, _) = self.loglik_grad(x);
        Ok((
            -ll / self.n_students,
            g.into_iter().map(|v| -v / self.n_students).collect(),
        ))
    }
}

/// Fits the teacher encouragement logit by BFGS with the analytic gradient.
pub fn estimate_teacher(data: &Dataset, opts: &TeacherOptions) -> Result<FitResult<TeacherParams>> {
    let mut est = TeacherEstimator::new(data)?;
    let names = est.names(opts.achiever_label.as_deref());
    est.separation_precheck(&names)?;

    let x0 = match &opts.start {
        Some(p) => est.pack(p),
        None => {
            let rate = data.records.iter().filter(|r| r.encouraged).count() as f64 / est.n_students;
            let mut v = vec![0.0; est.layout.len()];
            v[0] = (rate / (1.0 - rate)).ln();
            v
        }
    };
    let res = minimize(&mut est, &x0, &opts.bfgs)?;

    let (worst, mag) = res
        .x
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.abs()))
        .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    if mag > DIVERGENCE {
        return Err(Error::Separation {
            coefficient: names[worst].clone(),
        });
    }

    let params = est.unpack(&res.x);
    let (_, _, clamped) = est.loglik_grad(&res.x);
    let loglik = teacher_loglik(&params, data)?;
    Ok(FitResult {
        coefficients: names
            .iter()
            .zip(&res.x)
            .map(|(n, &v)| Coefficient {
                name: n.clone(),
                estimate: v,
                se: None,
            })
            .collect(),
        params,
        loglik,
        gradient_norm: res.grad_norm,
        iterations: res.iterations,
        converged: res.converged(),
        n_students: data.len(),
        clamped_evaluations: clamped,
        condition_number: None,
        notes: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Race, StudentRecord, StudentType};

    fn record(id: u64, school: u32, t: usize, b: bool) -> StudentRecord {
        StudentRecord {
            student_id: id,
            school_id: school,
            cohort_id: 1,
            student_type: StudentType::from_index(t).unwrap(),
            encouraged: b,
            took_prep: false,
        }
    }

    #[test]
    fn loglik_examples() {
        let one = Dataset::from_records(vec![record(1, 1, 0, true)]).unwrap();
        let ll = teacher_loglik(&TeacherParams::zero(), &one).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
        let two =
            Dataset::from_records(vec![record(1, 1, 0, true), record(2, 1, 0, false)]).unwrap();
        let ll = teacher_loglik(&TeacherParams::zero(), &two).unwrap();
        assert!((ll - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let recs: Vec<StudentRecord> = (0..300)
            .map(|i| {
                let t = (i * 7) % 24;
                record(i as u64, (i % 3) as u32, t, (i * 13) % 5 < 2)
            })
            .collect();
        let data = Dataset::from_records(recs).unwrap();
        let est = TeacherEstimator::new(&data).unwrap();
        let v: Vec<f64> = (0..est.layout().len())
            .map(|i| 0.1 * (i as f64 % 5.0) - 0.2)
            .collect();
        let (_, g, _) = est.loglik_grad(&v);
        for j in 0..v.len() {
            let h = 1e-6;
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += h;
            vm[j] -= h;
            let fd = (est.loglik_grad(&vp).0 - est.loglik_grad(&vm).0) / (2.0 * h);
            assert!(
                (fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0),
                "{j}: {fd} vs {}",
                g[j]
            );
        }
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let recs: Vec<StudentRecord> = (0..40)
            .map(|i| record(i, (i % 4) as u32, 3, i % 2 == 0))
            .collect();
        let data = Dataset::from_records(recs).unwrap();
        let est = TeacherEstimator::new(&data).unwrap();
        let v: Vec<f64> = (0..est.layout().len())
            .map(|i| i as f64 * 0.5 - 1.0)
            .collect();
        assert_eq!(est.pack(&est.unpack(&v)), v);
        let p = est.unpack(&v);
        assert_eq!(p.zeta[&0], 0.0);
        assert!(p.rho.iter().all(|r| r[Race::White.code()] == 0.0));
    }

    #[test]
    fn all_encouraged_is_separation() {
        let recs: Vec<StudentRecord> = (0..20)
            .map(|i| record(i, 1, (i % 24) as usize, true))
            .collect();
        let data = Dataset::from_records(recs).unwrap();
        match estimate_teacher(&data, &TeacherOptions::default()) {
            Err(Error::Separation { coefficient }) => assert_eq!(coefficient, "Constant"),
            other => panic!("expected separation, got {other:?}"),
        }
    }
}
