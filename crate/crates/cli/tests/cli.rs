use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coursegame::dataset::{read_records, Dataset};
use coursegame::estimation::{student_loglik, teacher_loglik, FitResult};
use coursegame::model::{StudentParams, TeacherParams};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coursegame"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.json")
}

fn write_csv(path: &Path, rows: &[(u64, u32, &str)]) {
    let mut s = String::from(
        "student_id,school_id,cohort_id,race,female,achiever,mother_college,encouraged,took_prep\n",
    );
    for (id, school, race) in rows {
        s += &format!("{id},{school},1,{race},0,1,0,0,1\n");
    }
    fs::write(path, s).unwrap();
}

#[test]
fn entropy_of_two_mirrored_schools() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(
        &data,
        &[
            (1, 1, "W"),
            (2, 1, "W"),
            (3, 1, "W"),
            (4, 1, "B"),
            (5, 2, "W"),
            (6, 2, "B"),
            (7, 2, "B"),
            (8, 2, "B"),
        ],
    );
    let stdout = ok(
        dir.path(),
        &["entropy", "--data", "d.csv", "--out", "e.json"],
    );
    let line = stdout.lines().find(|l| l.starts_with("H = ")).unwrap();
    let h: f64 = line[4..].parse().unwrap();
    let hg = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
    let want = 1.0 - hg / 2f64.ln();
    assert!((h - want).abs() < 1e-12, "{h} vs {want}");
    assert!((h - 0.1887).abs() < 1e-4);
    let rep: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("e.json")).unwrap()).unwrap();
    assert_eq!(rep["index"].as_f64().unwrap(), h);
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let out = bin().args(["entropy", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn stochastic_commands_need_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["simulate", "--out", "d.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn bad_rows_fail_validation_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(&data, &[(1, 1, "W"), (2, 1, "X"), (3, 1, "B")]);
    let out = run(dir.path(), &["validate", "--data", "d.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("line 3"), "{stdout}");
    // estimation refuses the file outright
    let out = run(
        dir.path(),
        &["estimate-teacher", "--data", "d.csv", "--out", "t.json"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unreachable_target_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let cfg = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", cfg, "simulate", "--out", "d.csv"]);
    let out = run(
        dir.path(),
        &[
            "reassign",
            "--data",
            "d.csv",
            "--target-H",
            "0.999",
            "--seed",
            "1",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("attainable range"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let cfg = cfg.to_str().unwrap();
    let d = dir.path();
    ok(d, &["--config", cfg, "simulate", "--out", "a.csv"]);
    ok(
        d,
        &["--config", cfg, "simulate", "--seed", "8", "--out", "b.csv"],
    );
    ok(
        d,
        &[
            "simulate",
            "--seed",
            "8",
            "--schools",
            "8",
            "--class-size",
            "40",
            "--out",
            "c.csv",
        ],
    );
    let read = |f: &str| fs::read(d.join(f)).unwrap();
    assert_ne!(read("a.csv"), read("b.csv"));
    assert_eq!(read("b.csv"), read("c.csv"));

    fs::write(d.join("bad.json"), r#"{"simulate": {"no-such-flag": 1}}"#).unwrap();
    let out = run(
        d,
        &[
            "--config", "bad.json", "simulate", "--seed", "1", "--out", "x.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seeded_commands_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for tag in ["1", "2"] {
        let data = format!("d{tag}.csv");
        ok(
            d,
            &[
                "simulate",
                "--seed",
                "5",
                "--schools",
                "6",
                "--class-size",
                "30",
                "--out",
                &data,
            ],
        );
        ok(
            d,
            &[
                "reassign",
                "--data",
                &data,
                "--target-H",
                "0.05",
                "--seed",
                "9",
                "--out",
                &format!("r{tag}.json"),
            ],
        );
    }
    for f in ["d", "r"] {
        let ext = if f == "d" { "csv" } else { "json" };
        assert_eq!(
            fs::read(d.join(format!("{f}1.{ext}"))).unwrap(),
            fs::read(d.join(format!("{f}2.{ext}"))).unwrap()
        );
    }
    let m1 = fs::read_to_string(d.join("r1.csv")).unwrap();
    assert_eq!(m1, fs::read_to_string(d.join("r2.csv")).unwrap());
    assert!(m1.starts_with("student_id,old_school,new_school\n"));
}

#[test]
fn pipeline_on_the_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config();
    let cfg = cfg.to_str().unwrap();
    ok(
        d,
        &[
            "--config",
            cfg,
            "simulate",
            "--out",
            "d.csv",
            "--classes",
            "c.json",
            "--params",
            "p.json",
        ],
    );
    ok(d, &["validate", "--data", "d.csv", "--classes", "c.json"]);
    ok(
        d,
        &[
            "--config",
            cfg,
            "estimate-teacher",
            "--data",
            "d.csv",
            "--out",
            "t.json",
        ],
    );
    ok(
        d,
        &[
            "--config",
            cfg,
            "estimate-student",
            "--data",
            "d.csv",
            "--teacher",
            "t.json",
            "--out",
            "s.json",
        ],
    );
    ok(
        d,
        &[
            "--config",
            cfg,
            "--threads",
            "1",
            "counterfactual",
            "--data",
            "d.csv",
            "--teacher",
            "t.json",
            "--student",
            "s.json",
            "--out",
            "curve.csv",
            "--cells",
            "cells.csv",
            "--json",
            "curve.json",
        ],
    );
    ok(
        d,
        &[
            "--config",
            cfg,
            "smooth",
            "--curve",
            "curve.csv",
            "--out",
            "smooth.csv",
        ],
    );
    for f in [
        "d.csv",
        "c.json",
        "p.json",
        "t.json",
        "s.json",
        "curve.csv",
        "cells.csv",
        "curve.json",
        "smooth.csv",
    ] {
        assert!(fs::metadata(d.join(f)).unwrap().len() > 0, "{f}");
    }
    let curve = fs::read_to_string(d.join("curve.csv")).unwrap();
    assert!(curve.starts_with("level,race,phi,sigma,weight\n"));
    assert!(curve.lines().count() > 1);

    // stored log-likelihoods survive the JSON round trip
    let data =
        Dataset::from_records(read_records(fs::File::open(d.join("d.csv")).unwrap()).unwrap())
            .unwrap();
    let tf: FitResult<TeacherParams> =
        serde_json::from_slice(&fs::read(d.join("t.json")).unwrap()).unwrap();
    let sf: FitResult<StudentParams> =
        serde_json::from_slice(&fs::read(d.join("s.json")).unwrap()).unwrap();
    let tl = teacher_loglik(&tf.params, &data).unwrap();
    assert!((tl - tf.loglik).abs() <= 1e-9, "{tl} vs {}", tf.loglik);
    let sl = student_loglik(&sf.params, &tf.params, &data).unwrap();
    assert!((sl - sf.loglik).abs() <= 1e-9, "{sl} vs {}", sf.loglik);
}
