//! Synthetic populations, simulated play, counterfactual sweeps over the
//! entropy index, and kernel smoothing of the resulting curves.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimation::{
    estimate_student, estimate_teacher, FitResult, StudentOptions, TeacherOptions,
};
use crate::game::{solve_game, teacher_index_from_counts, ClassGame, SolverOptions};
use crate::model::{
    race_of, Race, SchoolSystem, StudentParams, StudentRecord, StudentType, TeacherParams,
    NUM_RACES, NUM_TYPES,
};
use crate::reassign::{
    round_counts, solve_reassignment, Conservation, ReassignOptions, ReassignmentProblem,
    SolveStatus,
};
use crate::segregation::index_from_counts;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSize {
    pub min: u32,
    pub max: u32,
}

/// Recipe for a synthetic school system and the parameters it plays under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub schools: u32,
    pub cohorts: u32,
    /// Class sizes are uniform on `[min, max]`.
    pub class_size: ClassSize,
    /// Statewide White, Black, Hispanic shares.
    pub race_shares: [f64; NUM_RACES],
    pub female: f64,
    pub achiever: f64,
    pub mother_college: f64,
    /// Weight `s` on each school's dominant race.
    pub segregation: f64,
    /// Weight `c` on a dominant race drawn afresh for every class. A class
    /// mix is `(1 - s - c) * race_shares + s * e_school + c * e_class`, both
    /// races drawn from the state shares, so expected statewide shares are
    /// unchanged. The class part moves composition within a school.
    pub cohort_segregation: f64,
    /// Standard deviations of teacher and student school effects drawn on
    /// top of the given parameters; school 1 stays the reference at 0.
    #[serde(default)]
    pub school_effect_sd: [f64; 2],
    pub teacher: TeacherParams,
    pub student: StudentParams,
    pub seed: u64,
}

impl SimConfig {
    /// A Texas-like state under the reported point estimates.
    pub fn texas(schools: u32, class_size: u32, seed: u64) -> Self {
        SimConfig {
            schools,
            cohorts: 2,
            class_size: ClassSize {
                min: class_size,
                max: class_size,
            },
            race_shares: [0.539, 0.141, 0.320],
            female: 0.432,
            achiever: 0.366,
            mother_college: 0.386,
            segregation: 0.5,
            cohort_segregation: 0.3,
            school_effect_sd: [0.0, 0.5],
            teacher: TeacherParams::table3(),
            student: StudentParams::table3(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schools == 0 || self.cohorts == 0 {
            return Err(Error::InvalidInput(
                "need at least one school and one cohort".into(),
            ));
        }
        if self.class_size.min == 0 || self.class_size.min > self.class_size.max {
            return Err(Error::InvalidInput(format!(
                "class size range [{}, {}] is empty or zero",
                self.class_size.min, self.class_size.max
            )));
        }
        let sum: f64 = self.race_shares.iter().sum();
        if self.race_shares.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "race shares {:?} are not a distribution",
                self.race_shares
            )));
        }
        for (name, p) in [
            ("female", self.female),
            ("achiever", self.achiever),
            ("mother_college", self.mother_college),
            ("segregation", self.segregation),
            ("cohort_segregation", self.cohort_segregation),
            (
                "segregation + cohort_segregation",
                self.segregation + self.cohort_segregation,
            ),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self
            .school_effect_sd
            .iter()
            .any(|sd| !(sd.is_finite() && *sd >= 0.0))
        {
            return Err(Error::InvalidInput(format!(
                "school effect standard deviations {:?} must be non-negative",
                self.school_effect_sd
            )));
        }
        self.teacher.validate()?;
        self.student.validate()
    }

    /// The parameters play happens under: the configured ones plus drawn
    /// school effects.
    pub fn realized_params(&self) -> Result<(TeacherParams, StudentParams)> {
        self.validate()?;
        let mut teacher = self.teacher.clone();
        let mut student = self.student.clone();
        let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::InvalidInput(e.to_string()));
        let (nt, ns) = (
            normal(self.school_effect_sd[0])?,
            normal(self.school_effect_sd[1])?,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(EFFECT_STREAM);
        for school in 2..=self.schools {
            let (dt, ds) = (nt.sample(&mut rng), ns.sample(&mut rng));
            if self.school_effect_sd[0] > 0.0 {
                *teacher.zeta.entry(school).or_insert(0.0) += dt;
            }
            if self.school_effect_sd[1] > 0.0 {
                *student.gamma.entry(school).or_insert(0.0) += ds;
            }
        }
        Ok((teacher, student))
    }
}

/// Stream of the school-effect draws, apart from the population stream.
const EFFECT_STREAM: u64 = 1;

fn categorical(rng: &mut impl Rng, p: &[f64; NUM_RACES]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (r, &pr) in p.iter().enumerate() {
        acc += pr;
        if u < acc {
            return r;
        }
    }
    // rounding slop: last race with positive mass
    (0..NUM_RACES).rev().find(|&r| p[r] > 0.0).unwrap_or(0)
}

/// Draws schools, classes and student covariates. Outcomes are left at 0;
/// see [`simulate_play`]. Student ids run from 1 in class order.
pub fn gen_population(cfg: &SimConfig) -> Result<(SchoolSystem, Vec<StudentRecord>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut id = 0u64;
    for school in 1..=cfg.schools {
        let dominant = categorical(&mut rng, &cfg.race_shares);
        let spread = 1.0 - cfg.segregation - cfg.cohort_segregation;
        for cohort in 1..=cfg.cohorts {
            let own = categorical(&mut rng, &cfg.race_shares);
            let mut mix = cfg.race_shares.map(|p| spread * p);
            mix[dominant] += cfg.segregation;
            mix[own] += cfg.cohort_segregation;
            let size = rng.gen_range(cfg.class_size.min..=cfg.class_size.max);
            for _ in 0..size {
                let race = Race::from_code(categorical(&mut rng, &mix)).unwrap();
                let female = rng.gen_bool(cfg.female);
                let achiever = rng.gen_bool(cfg.achiever);
                let mother = rng.gen_bool(cfg.mother_college);
                id += 1;
                records.push(StudentRecord {
                    student_id: id,
                    school_id: school,
                    cohort_id: cohort,
                    student_type: StudentType::new(race, female, achiever, mother),
                    encouraged: false,
                    took_prep: false,
                });
            }
        }
    }
    let system = SchoolSystem::from_records(&records)?;
    Ok((system, records))
}

/// Uniform on the open unit interval from 53 random bits.
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Difference of two standard Gumbel draws, i.e. a standard logistic
/// shock, from the counter-based stream of `(seed, student_id)`.
/// `pair` selects draws `2 * pair` and `2 * pair + 1`.
pub fn logistic_shock(seed: u64, student_id: u64, pair: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(student_id);
    rng.set_word_pos(u128::from(4 * pair));
    let gumbel = |u: f64| -(-u.ln()).ln();
    let e0 = gumbel(open_unit(rng.next_u64()));
    let e1 = gumbel(open_unit(rng.next_u64()));
    e1 - e0
}

/// Fills `encouraged` and `took_prep` by drawing the model's shocks.
///
/// The teacher encourages when their index plus a logistic shock is
/// positive; the student then takes the coursework when their index at the
/// class equilibrium beliefs, plus `alpha` if encouraged, plus an
/// independent shock is positive.
pub fn simulate_play(
    teacher: &TeacherParams,
    student: &StudentParams,
    records: &[StudentRecord],
    seed: u64,
    solver: &SolverOptions,
) -> Result<Vec<StudentRecord>> {
    teacher.validate()?;
    student.validate()?;
    let system = SchoolSystem::from_records(records)?;
    // per class and type: (teacher index, student index without alpha)
    let indices: Vec<Result<[(f64, f64); NUM_TYPES]>> = system
        .classrooms
        .par_iter()
        .map(|c| {
            let game = ClassGame::for_classroom(teacher, student, c);
            let fp = game.solve(solver, None)?;
            let tfe = teacher.cohort_effect(c.cohort_id) + teacher.school_effect(c.school_id);
            let counts = c.counts_f64();
            let mut out = [(0.0, 0.0); NUM_TYPES];
            for (i, &t) in game.types.iter().enumerate() {
                out[t] = (
                    teacher_index_from_counts(teacher, &counts, t, tfe),
                    game.base[i] + game.social(i, &fp.sigma),
                );
            }
            Ok(out)
        })
        .collect();
    let mut table = BTreeMap::new();
    for (c, idx) in system.classrooms.iter().zip(indices) {
        table.insert(c.key(), idx?);
    }
    Ok(records
        .par_iter()
        .map(|r| {
            let (ut, us) = table[&(r.school_id, r.cohort_id)][r.student_type.index()];
            let encouraged = ut + logistic_shock(seed, r.student_id, 0) > 0.0;
            let bump = if encouraged { student.alpha } else { 0.0 };
            let took_prep = us + bump + logistic_shock(seed, r.student_id, 1) > 0.0;
            StudentRecord {
                encouraged,
                took_prep,
                ..r.clone()
            }
        })
        .collect())
}

/// Generates a population under `cfg` and plays it once.
pub fn simulate_dataset(cfg: &SimConfig, solver: &SolverOptions) -> Result<Dataset> {
    let (_, records) = gen_population(cfg)?;
    let (teacher, student) = cfg.realized_params()?;
    let played = simulate_play(&teacher, &student, &records, cfg.seed, solver)?;
    Dataset::from_records(played)
}

/// Absolute estimation errors against the generating parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryErrors {
    pub delta: Vec<f64>,
    /// Free entries of `rho` (Black and Hispanic columns).
    pub rho: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub lambda: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Recovery {
    pub teacher: FitResult<TeacherParams>,
    pub student: FitResult<StudentParams>,
    pub errors: RecoveryErrors,
}

/// Simulates under `cfg`, runs both estimation steps, and measures errors.
pub fn recover(
    cfg: &SimConfig,
    teacher_opts: &TeacherOptions,
    student_opts: &StudentOptions,
) -> Result<Recovery> {
    let data = simulate_dataset(cfg, &SolverOptions::default())?;
    let teacher = estimate_teacher(&data, teacher_opts)?;
    let student = estimate_student(&data, &teacher.params, student_opts)?;
    let abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    let (t, s) = (&teacher.params, &student.params);
    let rho = |p: &TeacherParams| -> Vec<f64> {
        p.rho.iter().flat_map(|row| row[1..].to_vec()).collect()
    };
    let flat = |m: &[[f64; NUM_RACES]; NUM_RACES]| -> Vec<f64> { m.concat() };
    let errors = RecoveryErrors {
        delta: abs(&t.delta, &cfg.teacher.delta),
        rho: abs(&rho(t), &rho(&cfg.teacher)),
        beta: abs(&s.beta, &cfg.student.beta),
        alpha: (s.alpha - cfg.student.alpha).abs(),
        lambda: abs(&flat(&s.lambda), &flat(&cfg.student.lambda)),
    };
    Ok(Recovery {
        teacher,
        student,
        errors,
    })
}

/// Which composition decides whether a class enters a filtered curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterBasis {
    /// The class as reassigned at each level (the plotted marker).
    #[default]
    Counterfactual,
    /// The class as observed, so every level keeps the same classes.
    Observed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualOptions {
    /// Cohort whose classes are reassigned (default: the last).
    pub cohort: Option<u32>,
    pub conservation: Conservation,
    /// Round shares into integer classes; otherwise use expected counts.
    pub round: bool,
    /// Restrict the Black curve to schools with few Hispanic students and
    /// the Hispanic curve to schools with few Black students.
    pub filter: bool,
    pub filter_share: f64,
    pub filter_basis: FilterBasis,
    pub seed: u64,
    pub reassign: ReassignOptions,
    pub solver: SolverOptions,
}

impl Default for CounterfactualOptions {
    fn default() -> Self {
        CounterfactualOptions {
            cohort: None,
            conservation: Conservation::Type,
            round: false,
            filter: true,
            filter_share: 0.10,
            filter_basis: FilterBasis::Counterfactual,
            seed: 0,
            reassign: ReassignOptions {
                starts: 3,
                ..ReassignOptions::default()
            },
            solver: SolverOptions::default(),
        }
    }
}

/// Count-weighted probabilities of one race at one desegregation level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Desegregation `1 - H` of the composition actually evaluated.
    pub level: f64,
    pub race: Race,
    pub phi: f64,
    pub sigma: f64,
    pub weight: f64,
}

/// One race group in one class at one level (a figure marker).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPoint {
    pub level: f64,
    pub school_id: u32,
    pub cohort_id: u32,
    pub race: Race,
    /// Share of the class of the same race.
    pub own_share: f64,
    pub phi: f64,
    pub sigma: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedTarget {
    pub target: f64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualCurve {
    /// Sorted by level, then race.
    pub points: Vec<CurvePoint>,
    pub cells: Vec<ClassPoint>,
    pub skipped: Vec<SkippedTarget>,
    pub observed_index: f64,
}

struct Sweep<'a> {
    teacher: &'a TeacherParams,
    student: &'a StudentParams,
    units: Vec<(u32, u32)>,
    teacher_fe: f64,
    student_fe: f64,
    /// Per unit and race, on the observed composition.
    observed_keep: Vec<[bool; NUM_RACES]>,
    filter: Option<(FilterBasis, f64)>,
    solver: SolverOptions,
}

/// Whether each race's curve may use a class with these race counts.
fn admits(race_counts: &[f64; NUM_RACES], share: f64) -> [bool; NUM_RACES] {
    let n: f64 = race_counts.iter().sum();
    [
        true,
        race_counts[Race::Hispanic.code()] < share * n,
        race_counts[Race::Black.code()] < share * n,
    ]
}

impl Sweep<'_> {
    fn evaluate(&self, counts: &[[f64; NUM_TYPES]]) -> Result<(Vec<CurvePoint>, Vec<ClassPoint>)> {
        let race_counts: Vec<[f64; NUM_RACES]> = counts
            .iter()
            .map(|row| {
                let mut rc = [0.0; NUM_RACES];
                for (t, &n) in row.iter().enumerate() {
                    rc[race_of(t)] += n;
                }
                rc
            })
            .collect();
        let level = 1.0 - index_from_counts(&race_counts)?.0;
        let per_unit: Vec<Result<Vec<ClassPoint>>> = counts
            .par_iter()
            .enumerate()
            .map(|(k, row)| {
                let mut game = ClassGame::from_counts(
                    self.teacher,
                    self.student,
                    row,
                    self.teacher_fe,
                    self.student_fe,
                );
                (game.school_id, game.cohort_id) = self.units[k];
                let eq = solve_game(&game, &self.solver)?;
                let size: f64 = row.iter().sum();
                let mut acc = [(0.0, 0.0, 0.0); NUM_RACES];
                for (i, &t) in eq.types.iter().enumerate() {
                    let a = &mut acc[race_of(t)];
                    a.0 += row[t] * eq.phi[i];
                    a.1 += row[t] * eq.sigma[i];
                    a.2 += row[t];
                }
                Ok(Race::ALL
                    .iter()
                    .filter(|r| acc[r.code()].2 > 0.0)
                    .map(|&race| {
                        let (p, s, w) = acc[race.code()];
                        ClassPoint {
                            level,
                            school_id: self.units[k].0,
                            cohort_id: self.units[k].1,
                            race,
                            own_share: w / size,
                            phi: p / w,
                            sigma: s / w,
                            weight: w,
                        }
                    })
                    .collect())
            })
            .collect();
        let mut cells = Vec::new();
        let mut sums = [(0.0, 0.0, 0.0); NUM_RACES];
        for (k, unit) in per_unit.into_iter().enumerate() {
            let keep = match self.filter {
                None => [true; NUM_RACES],
                Some((FilterBasis::Observed, _)) => self.observed_keep[k],
                Some((FilterBasis::Counterfactual, share)) => admits(&race_counts[k], share),
            };
            for cell in unit? {
                if keep[cell.race.code()] {
                    let s = &mut sums[cell.race.code()];
                    s.0 += cell.weight * cell.phi;
                    s.1 += cell.weight * cell.sigma;
                    s.2 += cell.weight;
                }
                cells.push(cell);
            }
        }
        let points = Race::ALL
            .iter()
            .filter(|r| sums[r.code()].2 > 0.0)
            .map(|&race| {
                let (p, s, w) = sums[race.code()];
                CurvePoint {
                    level,
                    race,
                    phi: p / w,
                    sigma: s / w,
                    weight: w,
                }
            })
            .collect();
        Ok((points, cells))
    }
}

/// Snaps entries within 1e-9 of an integer, so that unchanged classes
/// reproduce their observed counts bit for bit.
fn snap(v: f64) -> f64 {
    if (v - v.round()).abs() <= 1e-9 {
        v.round()
    } else {
        v
    }
}

/// Re-solves teacher and student behavior after reassigning the classes of
/// one cohort to each target index in `grid`.
///
/// Every class gets the enrollment-weighted average cohort and school
/// effects, so only composition differs between points. Teacher
/// probabilities are recomputed for the new composition and feed the
/// student equilibrium. Targets that cannot be reached are skipped and
/// listed.
pub fn counterfactual_run(
    teacher: &TeacherParams,
    student: &StudentParams,
    system: &SchoolSystem,
    grid: &[f64],
    opts: &CounterfactualOptions,
) -> Result<CounterfactualCurve> {
    teacher.validate()?;
    student.validate()?;
    let base = ReassignmentProblem::from_system(system, opts.cohort, 0.0, opts.conservation)?;
    let (mut tfe, mut sfe) = (0.0, 0.0);
    for (&(s, g), n) in base.units.iter().zip(&base.sizes) {
        tfe += n * (teacher.cohort_effect(g) + teacher.school_effect(s));
        sfe += n * (student.cohort_effect(g) + student.school_effect(s));
    }
    let total = base.total();
    let observed_keep = base
        .observed
        .iter()
        .map(|row| {
            let mut rc = [0.0; NUM_RACES];
            for (t, &p) in row.iter().enumerate() {
                rc[race_of(t)] += p;
            }
            admits(&rc, opts.filter_share)
        })
        .collect();
    let sweep = Sweep {
        teacher,
        student,
        units: base.units.clone(),
        teacher_fe: tfe / total,
        student_fe: sfe / total,
        observed_keep,
        filter: opts
            .filter
            .then_some((opts.filter_basis, opts.filter_share)),
        solver: opts.solver,
    };
    let observed_index = base.observed_index()?;

    let runs: Vec<(f64, Result<(Vec<CurvePoint>, Vec<ClassPoint>)>)> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &target)| {
            let run = || {
                let prob = base.with_target(target)?;
                let sol = solve_reassignment(&prob, &opts.reassign)?;
                if sol.status != SolveStatus::Optimal {
                    return Err(Error::InvalidInput(format!(
                        "reassignment did not meet the target (entropy residual {:.3e})",
                        sol.residuals.entropy
                    )));
                }
                let counts: Vec<[f64; NUM_TYPES]> = if opts.round {
                    round_counts(&sol.shares, &sol.sizes, opts.seed.wrapping_add(i as u64))?
                        .into_iter()
                        .map(|row| row.map(f64::from))
                        .collect()
                } else {
                    sol.shares
                        .iter()
                        .zip(&sol.sizes)
                        .map(|(row, n)| row.map(|p| snap(p * n)))
                        .collect()
                };
                sweep.evaluate(&counts)
            };
            (target, run())
        })
        .collect();

    let mut points = Vec::new();
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for (target, run) in runs {
        match run {
            Ok((p, c)) => {
                points.extend(p);
                cells.extend(c);
            }
            Err(e) if e.is_numerical() || matches!(e, Error::InvalidInput(_)) => {
                skipped.push(SkippedTarget {
                    target,
                    reason: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
    }
    points.sort_by(|a, b| a.level.total_cmp(&b.level).then(a.race.cmp(&b.race)));
    cells.sort_by(|a, b| {
        a.level
            .total_cmp(&b.level)
            .then((a.school_id, a.cohort_id, a.race).cmp(&(b.school_id, b.cohort_id, b.race)))
    });
    Ok(CounterfactualCurve {
        points,
        cells,
        skipped,
        observed_index,
    })
}

/// Writes curve points as CSV `level,race,phi,sigma,weight`.
pub fn write_curve_csv<W: Write>(writer: W, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["level", "race", "phi", "sigma", "weight"])?;
    for p in points {
        w.write_record([
            fmt17(p.level),
            p.race.to_string(),
            fmt17(p.phi),
            fmt17(p.sigma),
            fmt17(p.weight),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Epanechnikov kernel `0.75 (1 - u^2)` on `|u| < 1`.
pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smoothed {
    /// `(x, fitted y)` for every evaluation point with data in its window.
    pub points: Vec<(f64, f64)>,
    /// Evaluation points whose kernel window held no data.
    pub omitted: Vec<f64>,
}

/// Local-constant (Nadaraya-Watson) regression with Epanechnikov weights,
/// optionally scaled by observation weights. Inputs are summed in sorted
/// order, so the result does not depend on how the points are listed.
pub fn smooth_curve(
    x: &[f64],
    y: &[f64],
    weights: Option<&[f64]>,
    at: &[f64],
    bandwidth: f64,
) -> Result<Smoothed> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!(
            "bandwidth {bandwidth} must be positive"
        )));
    }
    if x.len() != y.len() || weights.is_some_and(|w| w.len() != x.len()) {
        return Err(Error::InvalidInput(
            "x, y and weights differ in length".into(),
        ));
    }
    let mut data: Vec<(f64, f64, f64)> = (0..x.len())
        .map(|i| (x[i], y[i], weights.map_or(1.0, |w| w[i])))
        .collect();
    if data
        .iter()
        .any(|(a, b, w)| !a.is_finite() || !b.is_finite() || !w.is_finite() || *w < 0.0)
    {
        return Err(Error::InvalidInput(
            "smoother inputs must be finite with non-negative weights".into(),
        ));
    }
    data.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    let mut out = Smoothed {
        points: Vec::new(),
        omitted: Vec::new(),
    };
    for &x0 in at {
        // deviations from the first y in the window keep constant input exact
        let (mut num, mut den, mut anchor) = (0.0, 0.0, None);
        for &(xi, yi, wi) in &data {
            let k = wi * epanechnikov((xi - x0) / bandwidth);
            if k > 0.0 {
                let a = *anchor.get_or_insert(yi);
                num += k * (yi - a);
                den += k;
            }
        }
        if let Some(a) = anchor.filter(|_| den > 0.0) {
            out.points.push((x0, a + num / den));
        } else {
            out.omitted.push(x0);
        }
    }
    Ok(out)
}
