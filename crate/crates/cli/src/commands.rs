use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use coursegame::dataset::{
    read_records, read_records_lenient, validate_dataset, write_records, Dataset,
};
use coursegame::estimation::{
    estimate_student, estimate_teacher, student_standard_errors, teacher_standard_errors,
    FitResult, GradientMode, LikelihoodVariant, StudentOptions, TeacherOptions,
};
use coursegame::game::SolverOptions;
use coursegame::model::{Race, SchoolSystem, StudentParams, TeacherParams, NUM_RACES};
use coursegame::reassign::{
    round_assignment, solve_reassignment, Conservation, ReassignOptions, ReassignmentProblem,
    SolveStatus,
};
use coursegame::segregation::{entropy_index, EntropyUnit};
use coursegame::simulate::{
    counterfactual_run, fmt17, gen_population, simulate_play, smooth_curve, write_curve_csv,
    CounterfactualOptions, FilterBasis, SimConfig,
};

use crate::{
    Basis, Cmd, CounterfactualArgs, EntropyArgs, Numerical, ReassignArgs, SimulateArgs, SmoothArgs,
    StudentArgs, TeacherArgs, Unit, ValidateArgs,
};

pub fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::EstimateTeacher(a) => teacher(a),
        Cmd::EstimateStudent(a) => student(a),
        Cmd::Entropy(a) => entropy(a),
        Cmd::Reassign(a) => reassign(a),
        Cmd::Counterfactual(a) => counterfactual(a),
        Cmd::Smooth(a) => smooth(a),
        Cmd::Validate(a) => validate(a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("cannot parse {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    let records = read_records(open(path)?).with_context(|| format!("in {}", path.display()))?;
    Ok(Dataset::from_records(records)?)
}

/// Parameters from a FitResult JSON or a bare parameter object.
fn load_params<P: DeserializeOwned>(path: &Path) -> Result<P> {
    let v: serde_json::Value = read_json(path)?;
    let inner = v.get("params").cloned().unwrap_or(v);
    serde_json::from_value(inner).with_context(|| format!("no parameters in {}", path.display()))
}

#[derive(Serialize, Deserialize)]
struct Generating {
    teacher: TeacherParams,
    student: StudentParams,
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.sim {
        Some(p) => read_json::<SimConfig>(p)?,
        None => {
            let mut c = SimConfig::texas(a.schools, a.class_size, a.seed);
            c.cohorts = a.cohorts;
            if let Some(s) = a.segregation {
                c.segregation = s;
            }
            if let Some(s) = a.cohort_segregation {
                c.cohort_segregation = s;
            }
            c
        }
    };
    cfg.seed = a.seed;
    let solver = SolverOptions {
        tol: a.tol.unwrap_or(SolverOptions::default().tol),
        ..SolverOptions::default()
    };
    let (system, records) = gen_population(&cfg)?;
    let (teacher, student) = cfg.realized_params()?;
    let played = simulate_play(&teacher, &student, &records, cfg.seed, &solver)?;
    let mut w = create(&a.out)?;
    write_records(&mut w, &played)?;
    w.flush()?;
    if let Some(p) = &a.classes {
        write_json(p, &system)?;
    }
    if let Some(p) = &a.params {
        write_json(p, &Generating { teacher, student })?;
    }
    let n = played.len() as f64;
    let share = |f: fn(&coursegame::model::StudentRecord) -> bool| {
        played.iter().filter(|r| f(r)).count() as f64 / n
    };
    println!(
        "simulated {} students in {} classes; encouraged {:.4}, took prep {:.4}",
        played.len(),
        system.classrooms.len(),
        share(|r| r.encouraged),
        share(|r| r.took_prep)
    );
    Ok(())
}

fn print_fit<P>(fit: &FitResult<P>) {
    println!(
        "loglik {} over {} students; {} iterations, gradient {:.3e}, converged {}",
        fmt17(fit.loglik),
        fit.n_students,
        fit.iterations,
        fit.gradient_norm,
        fit.converged
    );
    for c in &fit.coefficients {
        match c.se {
            Some(se) => println!("  {:<40} {:>12.5} ({:.5})", c.name, c.estimate, se),
            None => println!("  {:<40} {:>12.5}", c.name, c.estimate),
        }
    }
    for n in &fit.notes {
        println!("note: {n}");
    }
}

fn finish_fit<P>(fit: &FitResult<P>) -> Result<()> {
    if fit.converged {
        Ok(())
    } else {
        Err(Numerical(format!(
            "optimizer stopped after {} iterations with gradient norm {:.3e}",
            fit.iterations, fit.gradient_norm
        ))
        .into())
    }
}

fn bfgs(tol: Option<f64>, max_iter: Option<usize>) -> coursegame::optim::BfgsOptions {
    let mut o = coursegame::optim::BfgsOptions::default();
    if let Some(t) = tol {
        o.gtol = t;
    }
    if let Some(m) = max_iter {
        o.max_iter = m;
    }
    o
}

fn teacher(a: TeacherArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let opts = TeacherOptions {
        bfgs: bfgs(a.tol, a.max_iter),
        start: None,
        achiever_label: a.achiever_label,
    };
    let mut fit = estimate_teacher(&data, &opts)?;
    if !a.no_se && fit.converged {
        teacher_standard_errors(&mut fit, &data)?;
    }
    write_json(&a.out, &fit)?;
    print_fit(&fit);
    finish_fit(&fit)
}

fn student(a: StudentArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let t: TeacherParams = load_params(&a.teacher)?;
    let opts = StudentOptions {
        bfgs: bfgs(a.tol, a.max_iter),
        variant: if a.conditional {
            LikelihoodVariant::Conditional
        } else {
            LikelihoodVariant::Marginal
        },
        gradient: match a.fd_step {
            Some(step) => GradientMode::FiniteDifference { step },
            None => GradientMode::Analytic,
        },
        achiever_label: a.achiever_label,
        ..StudentOptions::default()
    };
    let mut fit = estimate_student(&data, &t, &opts)?;
    if !a.no_se && fit.converged {
        student_standard_errors(&mut fit, &t, &data, &opts)?;
    }
    write_json(&a.out, &fit)?;
    print_fit(&fit);
    finish_fit(&fit)
}

fn entropy(a: EntropyArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let unit = match a.unit {
        Unit::Classroom => EntropyUnit::Classroom,
        Unit::School => EntropyUnit::School,
    };
    let rep = entropy_index(&data.system, unit)?;
    if let Some(p) = &a.out {
        write_json(p, &rep)?;
    }
    println!("H = {}", fmt17(rep.index));
    println!(
        "state entropy {:.6}; race shares W {:.4} B {:.4} H {:.4}; {} units",
        rep.state_entropy,
        rep.race_shares[0],
        rep.race_shares[1],
        rep.race_shares[2],
        rep.units.len()
    );
    Ok(())
}

fn conservation(race_only: bool) -> Conservation {
    if race_only {
        Conservation::Race
    } else {
        Conservation::Type
    }
}

fn reassign(a: ReassignArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let prob = ReassignmentProblem::from_system(
        &data.system,
        a.cohort,
        a.target_h,
        conservation(a.race_only),
    )?;
    let mut opts = ReassignOptions {
        seed: a.seed,
        ..ReassignOptions::default()
    };
    if let Some(s) = a.starts {
        opts.starts = s;
    }
    let sol = solve_reassignment(&prob, &opts)?;
    write_json(&a.out, &sol)?;
    let assignment = round_assignment(&sol, &data.records, a.seed)?;
    let mapping = a.mapping.unwrap_or_else(|| a.out.with_extension("csv"));
    let mut w = csv::Writer::from_writer(create(&mapping)?);
    w.write_record(["student_id", "old_school", "new_school"])?;
    for m in &assignment.moves {
        w.write_record([
            m.student_id.to_string(),
            m.old_school.to_string(),
            m.new_school.to_string(),
        ])?;
    }
    w.flush()?;
    let moved = assignment
        .moves
        .iter()
        .filter(|m| m.old_school != m.new_school)
        .count();
    println!(
        "target H {} achieved {}; objective {}; {} of {} students change school",
        fmt17(sol.target),
        fmt17(sol.achieved_index),
        fmt17(sol.objective),
        moved,
        assignment.moves.len()
    );
    println!(
        "residuals: simplex {:.3e}, population {:.3e}, entropy {:.3e}",
        sol.residuals.simplex, sol.residuals.population, sol.residuals.entropy
    );
    if sol.status == SolveStatus::NotConverged {
        return Err(Numerical(format!(
            "entropy constraint violated by {:.3e} after {} outer iterations",
            sol.residuals.entropy, sol.outer_iterations
        ))
        .into());
    }
    Ok(())
}

fn counterfactual(a: CounterfactualArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let t: TeacherParams = load_params(&a.teacher)?;
    let s: StudentParams = load_params(&a.student)?;
    let mut opts = CounterfactualOptions {
        cohort: a.cohort,
        conservation: conservation(a.race_only),
        round: a.round,
        filter: !a.no_filter,
        filter_basis: match a.filter_basis {
            Basis::Counterfactual => FilterBasis::Counterfactual,
            Basis::Observed => FilterBasis::Observed,
        },
        seed: a.seed,
        ..CounterfactualOptions::default()
    };
    opts.reassign.seed = a.seed;
    if let Some(f) = a.filter_share {
        opts.filter_share = f;
    }
    if let Some(n) = a.starts {
        opts.reassign.starts = n;
    }
    let curve = counterfactual_run(&t, &s, &data.system, &a.targets, &opts)?;
    let mut w = create(&a.out)?;
    write_curve_csv(&mut w, &curve.points)?;
    w.flush()?;
    if let Some(p) = &a.cells {
        let mut w = csv::Writer::from_writer(create(p)?);
        w.write_record([
            "level",
            "school_id",
            "cohort_id",
            "race",
            "own_share",
            "phi",
            "sigma",
            "weight",
        ])?;
        for c in &curve.cells {
            w.write_record([
                fmt17(c.level),
                c.school_id.to_string(),
                c.cohort_id.to_string(),
                c.race.to_string(),
                fmt17(c.own_share),
                fmt17(c.phi),
                fmt17(c.sigma),
                fmt17(c.weight),
            ])?;
        }
        w.flush()?;
    }
    if let Some(p) = &a.json {
        write_json(p, &curve)?;
    }
    println!("observed H {:.6}", curve.observed_index);
    for p in &curve.points {
        println!(
            "  level {:.4} {} phi {:.5} sigma {:.5} weight {}",
            p.level, p.race, p.phi, p.sigma, p.weight
        );
    }
    for sk in &curve.skipped {
        println!("skipped H* {}: {}", sk.target, sk.reason);
    }
    if curve.points.is_empty() {
        return Err(Numerical("no target in the grid was attainable".into()).into());
    }
    Ok(())
}

#[derive(Deserialize)]
struct CurveRow {
    level: f64,
    race: String,
    phi: f64,
    sigma: f64,
    weight: f64,
}

fn smooth(a: SmoothArgs) -> Result<()> {
    if a.points < 2 {
        bail!("--points must be at least 2");
    }
    let mut rdr = csv::Reader::from_reader(open(&a.curve)?);
    let mut rows: Vec<(Race, CurveRow)> = Vec::new();
    for (i, row) in rdr.deserialize::<CurveRow>().enumerate() {
        let row = row.with_context(|| format!("{} line {}", a.curve.display(), i + 2))?;
        rows.push((row.race.parse()?, row));
    }
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    w.write_record(["race", "level", "phi", "sigma"])?;
    for code in 0..NUM_RACES {
        let race = Race::from_code(code).expect("race code");
        let sel: Vec<&CurveRow> = rows
            .iter()
            .filter(|(r, _)| *r == race)
            .map(|(_, c)| c)
            .collect();
        if sel.is_empty() {
            continue;
        }
        let x: Vec<f64> = sel.iter().map(|c| c.level).collect();
        let wts: Vec<f64> = sel.iter().map(|c| c.weight).collect();
        let (lo, hi) = x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        let at: Vec<f64> = (0..a.points)
            .map(|k| lo + (hi - lo) * k as f64 / (a.points - 1) as f64)
            .collect();
        let col = |f: fn(&CurveRow) -> f64| sel.iter().map(|c| f(c)).collect::<Vec<_>>();
        let phi = smooth_curve(&x, &col(|c| c.phi), Some(&wts), &at, a.bandwidth)?;
        let sigma = smooth_curve(&x, &col(|c| c.sigma), Some(&wts), &at, a.bandwidth)?;
        for (p, q) in phi.points.iter().zip(&sigma.points) {
            w.write_record([race.to_string(), fmt17(p.0), fmt17(p.1), fmt17(q.1)])?;
        }
        println!(
            "{race}: {} observations, {} points, {} without data",
            sel.len(),
            phi.points.len(),
            phi.omitted.len()
        );
    }
    w.flush()?;
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<()> {
    let parsed = read_records_lenient(open(&a.data)?)?;
    let system = match &a.classes {
        Some(p) => {
            let s: SchoolSystem = read_json(p)?;
            SchoolSystem::new(s.classrooms)?
        }
        None => SchoolSystem::from_records(&parsed.records)?,
    };
    let report = validate_dataset(&parsed.records, &system, &parsed.malformed);
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    for e in &report.errors {
        match e.line {
            Some(l) => println!("error: line {l}: {}", e.message),
            None => println!("error: {}", e.message),
        }
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    println!(
        "{} records, {} classes: {} errors, {} warnings",
        parsed.records.len(),
        system.classrooms.len(),
        report.errors.len(),
        report.warnings.len()
    );
    if !report.passed() {
        bail!(coursegame::Error::InvalidInput(format!(
            "{} validation errors",
            report.errors.len()
        )));
    }
    Ok(())
}
