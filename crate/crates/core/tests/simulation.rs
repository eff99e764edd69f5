mod common;

use coursegame::dataset::write_records;
use coursegame::game::{solve_equilibrium, SolverOptions};
use coursegame::model::{
    Classroom, Race, SchoolSystem, StudentParams, StudentRecord, StudentType, TeacherParams,
    NUM_TYPES,
};
use coursegame::segregation::{entropy_index, EntropyUnit};
use coursegame::simulate::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn csv_bytes(records: &[StudentRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    write_records(&mut out, records).unwrap();
    out
}

fn mixed(schools: u32, size: u32, seed: u64) -> SimConfig {
    SimConfig {
        cohorts: 1,
        segregation: 0.0,
        cohort_segregation: 0.0,
        ..SimConfig::texas(schools, size, seed)
    }
}

#[test]
fn fixed_seed_is_byte_identical() {
    let cfg = SimConfig::texas(6, 30, 17);
    let (_, a) = gen_population(&cfg).unwrap();
    let (_, b) = gen_population(&cfg).unwrap();
    assert_eq!(csv_bytes(&a), csv_bytes(&b));
    let s = SolverOptions::default();
    let pa = simulate_dataset(&cfg, &s).unwrap();
    let pb = simulate_dataset(&cfg, &s).unwrap();
    assert_eq!(csv_bytes(&pa.records), csv_bytes(&pb.records));
    let other = simulate_dataset(&SimConfig { seed: 18, ..cfg }, &s).unwrap();
    assert_ne!(csv_bytes(&pa.records), csv_bytes(&other.records));
}

#[test]
fn shares_fall_in_multinomial_bands() {
    let cfg = mixed(100, 1000, 3);
    let (system, records) = gen_population(&cfg).unwrap();
    let n = records.len() as f64;
    assert_eq!(system.total_students(), 100_000);
    let band = |p: f64| 3.0 * (p * (1.0 - p) / n).sqrt();
    for race in Race::ALL {
        let got = records
            .iter()
            .filter(|r| r.student_type.race == race)
            .count() as f64
            / n;
        let want = cfg.race_shares[race.code()];
        assert!(
            (got - want).abs() <= band(want),
            "{race:?}: {got} vs {want}"
        );
    }
    for (trait_of, want) in [
        (
            (|t: &StudentType| t.female) as fn(&StudentType) -> bool,
            cfg.female,
        ),
        (|t: &StudentType| t.achiever, cfg.achiever),
        (|t: &StudentType| t.mother_college, cfg.mother_college),
    ] {
        let got = records.iter().filter(|r| trait_of(&r.student_type)).count() as f64 / n;
        assert!((got - want).abs() <= band(want), "{got} vs {want}");
    }
}

#[test]
fn degenerate_config_is_homogeneous() {
    let cfg = SimConfig {
        race_shares: [0.0, 1.0, 0.0],
        female: 1.0,
        achiever: 0.0,
        mother_college: 1.0,
        ..SimConfig::texas(4, 25, 5)
    };
    let (system, records) = gen_population(&cfg).unwrap();
    let t = StudentType::new(Race::Black, true, false, true);
    assert!(records.iter().all(|r| r.student_type == t));
    assert!(system
        .classrooms
        .iter()
        .all(|c| c.present_types() == vec![t.index()]));
}

#[test]
fn saturated_indices_never_act() {
    let mut cfg = SimConfig::texas(5, 40, 6);
    cfg.school_effect_sd = [0.0, 0.0];
    cfg.teacher.delta = [-40.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    cfg.teacher.rho = [[0.0; 3]; 3];
    cfg.student.beta = [-40.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    cfg.student.alpha = 0.0;
    let data = simulate_dataset(&cfg, &SolverOptions::default()).unwrap();
    assert!(data.records.iter().all(|r| !r.encouraged && !r.took_prep));
}

fn one_class(t: StudentType, n: u64) -> Vec<StudentRecord> {
    (1..=n)
        .map(|id| StudentRecord {
            student_id: id,
            school_id: 1,
            cohort_id: 1,
            student_type: t,
            encouraged: false,
            took_prep: false,
        })
        .collect()
}

#[test]
fn class_frequencies_match_equilibrium() {
    let t = StudentType::new(Race::Hispanic, false, true, false);
    let n = 10_000u64;
    let records = one_class(t, n);
    let teacher = TeacherParams::table3();
    let student = StudentParams::table3();
    let mut counts = [0; NUM_TYPES];
    counts[t.index()] = n as u32;
    let class = Classroom::new(1, 1, counts).unwrap();
    let eq = solve_equilibrium(&teacher, &student, &class, &SolverOptions::default()).unwrap();
    let (sigma, phi) = (eq.sigma[0], eq.phi[0]);
    let played =
        simulate_play(&teacher, &student, &records, 99, &SolverOptions::default()).unwrap();
    let nf = n as f64;
    let a = played.iter().filter(|r| r.took_prep).count() as f64 / nf;
    let b = played.iter().filter(|r| r.encouraged).count() as f64 / nf;
    assert!(
        (a - sigma).abs() <= 3.0 * (sigma * (1.0 - sigma) / nf).sqrt(),
        "{a} vs {sigma}"
    );
    assert!(
        (b - phi).abs() <= 3.0 * (phi * (1.0 - phi) / nf).sqrt(),
        "{b} vs {phi}"
    );
}

#[test]
fn no_encouragement_effect_means_independence() {
    let t = StudentType::new(Race::White, true, false, false);
    let n = 200_000u64;
    let records = one_class(t, n);
    let mut teacher = TeacherParams::zero();
    teacher.delta[0] = -0.4;
    let mut student = StudentParams::zero();
    student.beta[0] = 0.7;
    let played = simulate_play(&teacher, &student, &records, 7, &SolverOptions::default()).unwrap();
    let mut table = [[0.0f64; 2]; 2];
    for r in &played {
        table[usize::from(r.encouraged)][usize::from(r.took_prep)] += 1.0;
    }
    let nf = n as f64;
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut chi2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / nf;
            chi2 += (table[i][j] - e).powi(2) / e;
        }
    }
    // 99th percentile of chi-square with one degree of freedom
    assert!(chi2 < 6.635, "chi2 = {chi2}");
}

#[test]
fn shocks_are_standard_logistic() {
    let n = 50_000u64;
    let draws: Vec<f64> = (1..=n).map(|id| logistic_shock(3, id, 0)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    let want_var = std::f64::consts::PI.powi(2) / 3.0;
    assert!(mean.abs() < 4.0 * (want_var / n as f64).sqrt());
    assert!((var - want_var).abs() / want_var < 0.03);
    let below = draws.iter().filter(|&&d| d < 1.0).count() as f64 / n as f64;
    let cdf = common::logit(1.0);
    assert!((below - cdf).abs() < 4.0 * (cdf * (1.0 - cdf) / n as f64).sqrt());
    // keyed, not sequential
    assert_eq!(logistic_shock(3, 42, 1), logistic_shock(3, 42, 1));
    assert_ne!(logistic_shock(3, 42, 0), logistic_shock(3, 42, 1));
}

fn no_effects_population(seed: u64) -> SchoolSystem {
    let (system, _) = gen_population(&SimConfig::texas(8, 30, seed)).unwrap();
    system
}

#[test]
fn observed_target_reproduces_baseline() {
    let system = no_effects_population(41);
    let teacher = TeacherParams::table3();
    let student = StudentParams::table3();
    let opts = CounterfactualOptions {
        cohort: Some(2),
        filter: false,
        ..Default::default()
    };
    let cohort: Vec<&Classroom> = system
        .classrooms
        .iter()
        .filter(|c| c.cohort_id == 2)
        .collect();
    let cohort_system = SchoolSystem::new(cohort.iter().map(|c| (*c).clone()).collect()).unwrap();
    let h = entropy_index(&cohort_system, EntropyUnit::Classroom)
        .unwrap()
        .index;
    let curve = counterfactual_run(&teacher, &student, &system, &[h], &opts).unwrap();
    assert!(curve.skipped.is_empty());
    assert!((curve.observed_index - h).abs() <= 1e-12);

    let mut sums = [(0.0, 0.0, 0.0); 3];
    for c in &cohort {
        let eq = solve_equilibrium(&teacher, &student, c, &opts.solver).unwrap();
        for (i, &t) in eq.types.iter().enumerate() {
            let n = f64::from(c.counts[t]);
            let s = &mut sums[StudentType::from_index(t).unwrap().race.code()];
            s.0 += n * eq.phi[i];
            s.1 += n * eq.sigma[i];
            s.2 += n;
        }
    }
    assert_eq!(curve.points.len(), 3);
    for p in &curve.points {
        let (phi, sigma, w) = sums[p.race.code()];
        assert!((p.level - (1.0 - h)).abs() <= 1e-12);
        assert_eq!(p.weight, w);
        assert!((p.phi - phi / w).abs() <= 1e-12, "{} vs {}", p.phi, phi / w);
        assert!(
            (p.sigma - sigma / w).abs() <= 1e-9,
            "{} vs {}",
            p.sigma,
            sigma / w
        );
    }
}

#[test]
fn fractional_mode_ignores_the_seed() {
    let system = no_effects_population(42);
    let (t, s) = (TeacherParams::table3(), StudentParams::table3());
    let grid = [0.05, 0.15];
    let run = |seed, round, filter| {
        let opts = CounterfactualOptions {
            seed,
            round,
            filter,
            ..Default::default()
        };
        counterfactual_run(&t, &s, &system, &grid, &opts).unwrap()
    };
    let a = run(1, false, true);
    assert!(a.skipped.is_empty());
    assert_eq!(a, run(2, false, true));

    let r1 = run(1, true, false);
    assert_eq!(r1, run(1, true, false));
    // rounding keeps the cohort's race totals at every level
    let frac = run(1, false, false);
    let by_race = |curve: &CounterfactualCurve| -> Vec<f64> {
        Race::ALL
            .iter()
            .map(|&r| {
                curve
                    .points
                    .iter()
                    .filter(|p| p.race == r)
                    .map(|p| p.weight)
                    .sum()
            })
            .collect()
    };
    for (r, f) in by_race(&r1).iter().zip(by_race(&frac)) {
        assert_eq!(*r, r.round());
        assert!((r - f).abs() <= 1e-6, "{r} vs {f}");
    }
    assert_eq!(r1.points.len(), frac.points.len());
}

#[test]
fn curve_csv_round_trips() {
    let points = vec![CurvePoint {
        level: 0.1 + 0.2,
        race: Race::Black,
        phi: 1.0 / 3.0,
        sigma: std::f64::consts::E / 10.0,
        weight: 12.0,
    }];
    let mut out = Vec::new();
    write_curve_csv(&mut out, &points).unwrap();
    let text = String::from_utf8(out).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "B");
    assert_eq!(row[0].parse::<f64>().unwrap(), points[0].level);
    assert_eq!(row[2].parse::<f64>().unwrap(), points[0].phi);
    assert_eq!(row[3].parse::<f64>().unwrap(), points[0].sigma);
}

#[test]
fn smoother_constant_and_symmetric() {
    let x = [0.01, 0.2, 0.21, 0.5, 0.77, 0.9];
    let y = [0.3; 6];
    let at: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let out = smooth_curve(&x, &y, None, &at, 0.05).unwrap();
    assert!(!out.points.is_empty() && !out.omitted.is_empty());
    assert!(out.points.iter().all(|&(_, v)| v == 0.3));

    let h = 0.05;
    let sym = smooth_curve(&[-h / 2.0, h / 2.0], &[0.0, 1.0], None, &[0.0], h).unwrap();
    assert_eq!(sym.points, vec![(0.0, 0.5)]);
}

#[test]
fn smoother_three_point_window() {
    let x = [-0.5, 0.0, 0.5];
    let y = [1.0, 2.0, 4.0];
    let out = smooth_curve(&x, &y, None, &[0.0, 0.25, 3.0], 1.0).unwrap();
    // weights 0.5625, 0.75, 0.5625 at 0; 0.328125, 0.703125, 0.703125 at 0.25
    assert!((out.points[0].1 - 2.3).abs() <= 1e-12);
    assert!((out.points[1].1 - 97.0 / 37.0).abs() <= 1e-12);
    assert_eq!(out.omitted, vec![3.0]);
    assert_eq!(epanechnikov(0.0), 0.75);
    assert_eq!(epanechnikov(1.0), 0.0);
}

#[test]
fn smoother_ignores_point_order_and_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pts: Vec<(f64, f64, f64)> = (0..40)
        .map(|i| {
            let x = i as f64 / 40.0;
            (x, (7.0 * x).sin(), 1.0 + (i % 5) as f64)
        })
        .collect();
    let at: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
    let run = |p: &[(f64, f64, f64)]| {
        let x: Vec<f64> = p.iter().map(|v| v.0).collect();
        let y: Vec<f64> = p.iter().map(|v| v.1).collect();
        let w: Vec<f64> = p.iter().map(|v| v.2).collect();
        smooth_curve(&x, &y, Some(&w), &at, 0.05).unwrap()
    };
    let base = run(&pts);
    let (lo, hi) = pts
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p.1), h.max(p.1)));
    assert!(base.points.iter().all(|&(_, v)| (lo..=hi).contains(&v)));
    for _ in 0..5 {
        pts.shuffle(&mut rng);
        assert_eq!(run(&pts), base);
    }
    assert!(smooth_curve(&[0.0], &[1.0], None, &[0.0], 0.0).is_err());
}
