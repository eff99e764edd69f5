//! Independent oracles shared by the integration tests. Nothing here calls
//! into the solver code paths it is used to check.
#![allow(dead_code)]

use coursegame::model::{Classroom, Race, StudentParams, StudentType, TeacherParams, NUM_TYPES};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn logit(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

pub fn dot6(x: &[f64; 6], c: &[f64; 6]) -> f64 {
    x.iter().zip(c).map(|(a, b)| a * b).sum()
}

/// Bisection for the root of a continuous `f` with `f(lo) > 0 > f(hi)`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    assert!(f(lo) >= 0.0 && f(hi) <= 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Dense grid search followed by Newton iterations with a central-difference
/// Jacobian, for a root of `F: [0,1]^2 -> R^2`.
pub fn root2d(f: impl Fn([f64; 2]) -> [f64; 2]) -> [f64; 2] {
    let n = 200;
    let mut best = ([0.5, 0.5], f64::INFINITY);
    for i in 0..=n {
        for j in 0..=n {
            let p = [i as f64 / n as f64, j as f64 / n as f64];
            let v = f(p);
            let m = v[0].abs().max(v[1].abs());
            if m < best.1 {
                best = (p, m);
            }
        }
    }
    let mut x = best.0;
    for _ in 0..100 {
        let v = f(x);
        let h = 1e-7;
        let mut jac = [[0.0; 2]; 2];
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let (fp, fm) = (f(xp), f(xm));
            for r in 0..2 {
                jac[r][k] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        let dx0 = (v[0] * jac[1][1] - v[1] * jac[0][1]) / det;
        let dx1 = (jac[0][0] * v[1] - jac[1][0] * v[0]) / det;
        x = [x[0] - dx0, x[1] - dx1];
        if dx0.abs().max(dx1.abs()) < 1e-15 {
            break;
        }
    }
    x
}

pub fn random_type(rng: &mut ChaCha8Rng) -> StudentType {
    StudentType::from_index(rng.gen_range(0..NUM_TYPES)).unwrap()
}

pub fn classroom(pairs: &[(usize, u32)]) -> Classroom {
    let mut counts = [0; NUM_TYPES];
    for &(t, n) in pairs {
        counts[t] += n;
    }
    Classroom::new(1, 1, counts).unwrap()
}

pub fn random_teacher(rng: &mut ChaCha8Rng) -> TeacherParams {
    let mut p = TeacherParams::zero();
    for d in p.delta.iter_mut() {
        *d = rng.gen_range(-1.5..1.5);
    }
    for row in p.rho.iter_mut() {
        for v in row.iter_mut().skip(1) {
            *v = rng.gen_range(-2.0..2.0);
        }
    }
    p
}

/// Random student parameters whose lambda rows all have |lambda| <= `lam_max`.
pub fn random_student(rng: &mut ChaCha8Rng, lam_max: f64) -> StudentParams {
    let mut p = StudentParams::zero();
    for b in p.beta.iter_mut() {
        *b = rng.gen_range(-1.5..1.5);
    }
    p.alpha = rng.gen_range(-1.0..1.5);
    if lam_max > 0.0 {
        for row in p.lambda.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(-lam_max..lam_max);
            }
        }
    }
    p
}

pub fn race_index(t: StudentType) -> usize {
    match t.race {
        Race::White => 0,
        Race::Black => 1,
        Race::Hispanic => 2,
    }
}

pub mod reassign_oracle;
