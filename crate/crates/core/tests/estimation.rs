mod common;

use common::logit;
use coursegame::dataset::Dataset;
use coursegame::estimation::*;
use coursegame::game::SolverOptions;
use coursegame::model::{Race, StudentParams, StudentRecord, StudentType, TeacherParams};
use coursegame::simulate::{simulate_dataset, SimConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_data(seed: u64) -> (SimConfig, Dataset) {
    let cfg = SimConfig::texas(10, 40, seed);
    let data = simulate_dataset(&cfg, &SolverOptions::default()).unwrap();
    (cfg, data)
}

fn white_male(id: u64, school: u32, cohort: u32, b: bool, a: bool) -> StudentRecord {
    StudentRecord {
        student_id: id,
        school_id: school,
        cohort_id: cohort,
        student_type: StudentType::new(Race::White, false, false, false),
        encouraged: b,
        took_prep: a,
    }
}

#[test]
fn teacher_intercept_is_sample_log_odds() {
    let n = 400u64;
    let ones = 130u64;
    let recs = (1..=n)
        .map(|i| white_male(i, 1, 1, i <= ones, false))
        .collect();
    let data = Dataset::from_records(recs).unwrap();
    let mut fit = estimate_teacher(&data, &TeacherOptions::default()).unwrap();
    let r = ones as f64 / n as f64;
    assert!(fit.converged);
    assert!((fit.params.delta[0] - (r / (1.0 - r)).ln()).abs() < 1e-6);
    assert!((logit(fit.params.delta[0]) - r).abs() < 1e-7);

    let se = teacher_standard_errors(&mut fit, &data).unwrap();
    let want = 1.0 / (n as f64 * r * (1.0 - r)).sqrt();
    let got = se.se.unwrap()[0].unwrap();
    assert!((got - want).abs() / want < 1e-4, "{got} vs {want}");
}

#[test]
fn duplicated_covariate_is_reported_singular() {
    // everyone female: the female column repeats the constant
    let recs: Vec<_> = (1..=300u64)
        .map(|i| StudentRecord {
            student_type: StudentType::new(Race::White, true, i % 3 == 0, false),
            ..white_male(i, 1, 1, i % 4 == 0, i % 2 == 0)
        })
        .collect();
    let data = Dataset::from_records(recs).unwrap();
    let mut fit = estimate_teacher(&data, &TeacherOptions::default()).unwrap();
    let se = teacher_standard_errors(&mut fit, &data).unwrap();
    assert!(se.se.is_none());
    assert!(se.condition_number > MAX_CONDITION);
    assert!(fit.coefficients.iter().all(|c| c.se.is_none()));
    assert!(fit.notes.iter().any(|n| n.contains("singular")));
}

#[test]
fn logliks_ignore_student_order() {
    let (cfg, data) = small_data(21);
    let (t, s) = cfg.realized_params().unwrap();
    let mut recs = data.records.clone();
    recs.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let shuffled = Dataset::from_records(recs).unwrap();
    let tl = teacher_loglik(&t, &data).unwrap();
    let tl2 = teacher_loglik(&t, &shuffled).unwrap();
    assert!((tl - tl2).abs() <= 1e-9 * tl.abs());
    let sl = student_loglik(&s, &t, &data).unwrap();
    let sl2 = student_loglik(&s, &t, &shuffled).unwrap();
    assert!((sl - sl2).abs() <= 1e-9 * sl.abs());
}

#[test]
fn fits_keep_normalizations() {
    let (_, data) = small_data(22);
    let tf = estimate_teacher(&data, &TeacherOptions::default()).unwrap();
    assert!(tf.params.rho.iter().all(|row| row[0] == 0.0));
    assert_eq!(tf.params.cohort_effect(1), 0.0);
    assert_eq!(tf.params.school_effect(1), 0.0);
    assert!(tf.coefficient("xi[cohort=1]").is_none());
    assert!(tf.coefficient("zeta[school=1]").is_none());
    assert!(tf.coefficient("zeta[school=2]").is_some());

    let sf = estimate_student(&data, &tf.params, &StudentOptions::default()).unwrap();
    assert_eq!(sf.params.cohort_effect(1), 0.0);
    assert_eq!(sf.params.school_effect(1), 0.0);
    assert!(sf.coefficient("kappa[cohort=1]").is_none());
    assert!(sf.coefficient("gamma[school=1]").is_none());
}

#[test]
fn student_gradient_matches_central_differences() {
    let (cfg, data) = small_data(23);
    let (t, _) = cfg.realized_params().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for variant in [LikelihoodVariant::Marginal, LikelihoodVariant::Conditional] {
        let opts = StudentOptions {
            variant,
            ..Default::default()
        };
        let mut est = StudentEstimator::new(&data, &t, &opts).unwrap();
        for _ in 0..5 {
            let mut p = StudentParams::table3();
            for b in p.beta.iter_mut() {
                *b += rng.gen_range(-0.3..0.3);
            }
            p.alpha += rng.gen_range(-0.5..0.5);
            for row in p.lambda.iter_mut() {
                for l in row.iter_mut() {
                    *l = rng.gen_range(-1.0..1.0);
                }
            }
            let mut v = est.pack(&p);
            for x in v[7 + 9..].iter_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
            let (_, g) = est.loglik_grad(&v).unwrap();
            let fd = est.fd_gradient(&v, 1e-5).unwrap();
            let scale = g.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b} ({variant:?})");
            }
        }
    }
}

#[test]
fn no_game_reduces_to_logit() {
    let (cfg, data) = small_data(24);
    let (t, _) = cfg.realized_params().unwrap();
    let mut s = StudentParams::table3();
    s.alpha = 0.0;
    s.lambda = [[0.0; 3]; 3];
    s.gamma.insert(3, 0.4);
    s.kappa.insert(2, -0.2);
    let ll = student_loglik(&s, &t, &data).unwrap();
    let want: f64 = data
        .records
        .iter()
        .map(|r| {
            let x = r.student_type.covariates();
            let u = common::dot6(&x, &s.beta)
                + s.cohort_effect(r.cohort_id)
                + s.school_effect(r.school_id);
            let p = logit(u);
            if r.took_prep {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    assert!((ll - want).abs() <= 1e-9 * want.abs(), "{ll} vs {want}");
}

#[test]
fn never_encouraged_classes_ignore_alpha() {
    let (cfg, data) = small_data(25);
    let (mut t, mut s) = cfg.realized_params().unwrap();
    t.delta = [-40.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    t.rho = [[0.0; 3]; 3];
    let base = student_loglik(&s, &t, &data).unwrap();
    s.alpha += 3.0;
    let bumped = student_loglik(&s, &t, &data).unwrap();
    assert!((base - bumped).abs() <= 1e-9 * base.abs());
}

#[test]
fn single_school_has_no_school_effects() {
    let mut cfg = SimConfig::texas(1, 80, 26);
    cfg.cohorts = 6;
    cfg.segregation = 0.0;
    cfg.cohort_segregation = 0.7;
    let data = simulate_dataset(&cfg, &SolverOptions::default()).unwrap();
    let tf = estimate_teacher(&data, &TeacherOptions::default()).unwrap();
    assert!(tf.converged);
    assert!(tf.coefficients.iter().all(|c| !c.name.starts_with("zeta")));
    let opts = StudentOptions {
        bfgs: coursegame::optim::BfgsOptions {
            max_iter: 100,
            ..Default::default()
        },
        ..Default::default()
    };
    let sf = estimate_student(&data, &tf.params, &opts).unwrap();
    assert!(sf.coefficients.iter().all(|c| !c.name.starts_with("gamma")));
    assert!(sf.params.gamma.values().all(|&g| g == 0.0));
    assert_eq!(sf.coefficients.len(), 6 + 1 + 9 + 5);
    // cohort effects are class effects here, so the fit may drift along the
    // unidentified lambda direction, but never below the truth
    let (_, s) = cfg.realized_params().unwrap();
    let at_truth = student_loglik(&s, &tf.params, &data).unwrap();
    assert!(sf.loglik >= at_truth - 1e-9);
}

#[test]
fn two_starts_reach_the_same_likelihood() {
    let cfg = SimConfig::texas(20, 60, 27);
    let data = simulate_dataset(&cfg, &SolverOptions::default()).unwrap();
    let tf = estimate_teacher(&data, &TeacherOptions::default()).unwrap();
    let tight = StudentOptions {
        bfgs: coursegame::optim::BfgsOptions {
            gtol: 1e-9,
            ..Default::default()
        },
        ..Default::default()
    };
    let cold = estimate_student(&data, &tf.params, &tight).unwrap();
    let warm = estimate_student(
        &data,
        &tf.params,
        &StudentOptions {
            start: Some(StudentParams::table3()),
            ..tight.clone()
        },
    )
    .unwrap();
    assert!(cold.converged && warm.converged);
    assert!(
        (cold.loglik - warm.loglik).abs() <= 1e-6,
        "{} vs {}",
        cold.loglik,
        warm.loglik
    );
}

#[test]
fn truth_beats_lambda_perturbations_on_large_data() {
    let cfg = SimConfig::texas(80, 150, 28);
    let data = simulate_dataset(&cfg, &SolverOptions::default()).unwrap();
    let (t, s) = cfg.realized_params().unwrap();
    let at_truth = student_loglik(&s, &t, &data).unwrap();
    for r in 0..3 {
        for c in 0..3 {
            for d in [-0.5, 0.5] {
                let mut p = s.clone();
                p.lambda[r][c] += d;
                let ll = student_loglik(&p, &t, &data).unwrap();
                assert!(at_truth > ll, "lambda[{r}][{c}] {d:+}: {at_truth} <= {ll}");
            }
        }
    }
}

#[test]
fn teacher_truth_beats_rho_perturbations() {
    let cfg = SimConfig::texas(80, 150, 29);
    let data = simulate_dataset(&cfg, &SolverOptions::default()).unwrap();
    let (t, _) = cfg.realized_params().unwrap();
    let at_truth = teacher_loglik(&t, &data).unwrap();
    let mut p = TeacherParams::clone(&t);
    p.rho[1][1] += 0.5;
    assert!(at_truth > teacher_loglik(&p, &data).unwrap());
}
