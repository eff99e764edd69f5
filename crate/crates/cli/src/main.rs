//! `coursegame` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure
//! (non-convergence, infeasible target, singular information).

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "coursegame",
    version,
    about = "Coursework-choice game: simulate, estimate, reassign"
)]
pub struct Cli {
    /// JSON file of flag values; flags on the command line take precedence.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Draw a synthetic population and play the game on it.
    Simulate(SimulateArgs),
    /// First step: teacher encouragement logit.
    EstimateTeacher(TeacherArgs),
    /// Second step: student coursework game given a teacher fit.
    EstimateStudent(StudentArgs),
    /// Theil entropy segregation index of a dataset.
    Entropy(EntropyArgs),
    /// Reassign students to reach a target entropy index.
    Reassign(ReassignArgs),
    /// Re-simulate coursework over a grid of entropy targets.
    Counterfactual(CounterfactualArgs),
    /// Kernel-smooth a counterfactual curve.
    Smooth(SmoothArgs),
    /// Check a student-record CSV.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub seed: u64,
    /// Student-record CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Full simulation recipe as JSON; shape flags below are then ignored.
    #[arg(long, value_name = "JSON")]
    pub sim: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub schools: u32,
    #[arg(long, default_value_t = 2)]
    pub cohorts: u32,
    #[arg(long, default_value_t = 60)]
    pub class_size: u32,
    #[arg(long)]
    pub segregation: Option<f64>,
    #[arg(long)]
    pub cohort_segregation: Option<f64>,
    /// Also write the classroom aggregates as JSON.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Also write the generating parameters (with drawn school effects).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Equilibrium residual tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TeacherArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// FitResult JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Gradient tolerance of the optimizer.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Accepted for uniform scripts; estimation draws no random numbers.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip standard errors.
    #[arg(long)]
    pub no_se: bool,
    /// Row label of the achiever covariate.
    #[arg(long)]
    pub achiever_label: Option<String>,
}

#[derive(Args, Debug)]
pub struct StudentArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Teacher FitResult (or bare parameter) JSON.
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Accepted for uniform scripts; estimation draws no random numbers.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Condition on observed encouragement instead of mixing over it.
    #[arg(long)]
    pub conditional: bool,
    /// Use central differences with this step instead of the analytic gradient.
    #[arg(long)]
    pub fd_step: Option<f64>,
    #[arg(long)]
    pub no_se: bool,
    #[arg(long)]
    pub achiever_label: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Unit {
    Classroom,
    School,
}

#[derive(Args, Debug)]
pub struct EntropyArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "classroom")]
    pub unit: Unit,
    /// EntropyReport JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReassignArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "target-H", visible_alias = "target-h")]
    pub target_h: f64,
    #[arg(long)]
    pub seed: u64,
    /// ReassignmentSolution JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-student mapping CSV (default: `out` with a .csv extension).
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Cohort to reassign (default: the last).
    #[arg(long)]
    pub cohort: Option<u32>,
    /// Conserve race totals only.
    #[arg(long)]
    pub race_only: bool,
    #[arg(long)]
    pub starts: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Basis {
    Counterfactual,
    Observed,
}

#[derive(Args, Debug)]
pub struct CounterfactualArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Curve CSV `level,race,phi,sigma,weight`.
    #[arg(long)]
    pub out: PathBuf,
    /// Entropy targets H*.
    #[arg(long, value_delimiter = ',', default_value = "0,0.33,0.66,0.99")]
    pub targets: Vec<f64>,
    /// Per-class points CSV.
    #[arg(long)]
    pub cells: Option<PathBuf>,
    /// Full curve JSON, including skipped targets.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub cohort: Option<u32>,
    #[arg(long)]
    pub race_only: bool,
    /// Round reassigned shares into integer classes.
    #[arg(long)]
    pub round: bool,
    /// Keep every class in both race curves.
    #[arg(long)]
    pub no_filter: bool,
    #[arg(long)]
    pub filter_share: Option<f64>,
    #[arg(long, value_enum, default_value = "counterfactual")]
    pub filter_basis: Basis,
    #[arg(long)]
    pub starts: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SmoothArgs {
    /// Curve CSV from `counterfactual`.
    #[arg(long)]
    pub curve: PathBuf,
    #[arg(long)]
    pub bandwidth: f64,
    /// Evaluation points per race, evenly spaced over its levels.
    #[arg(long, default_value_t = 50)]
    pub points: usize,
    /// CSV `race,level,phi,sigma`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Classroom aggregates JSON to check the records against.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// ValidationReport JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure of a numerical procedure rather than of the input.
#[derive(Debug)]
pub struct Numerical(pub String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Numerical>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<coursegame::Error>() {
            return if e.is_numerical() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cmd = Cli::command().args_override_self(true);
    let argv = match config::merge_config(&cmd, argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = match cmd
        .try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
