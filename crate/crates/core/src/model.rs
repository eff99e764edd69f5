//! Domain types: student types, records, classrooms and utility parameters.
//!
//! A student's observable profile is a race plus three binary traits, so the
//! feasible type space has 3 x 2^3 = 24 points. Everything downstream (the
//! equilibrium, the likelihoods, the reassignment) is computed on this type
//! space rather than per student.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of feasible student types.
pub const NUM_TYPES: usize = 24;
/// Number of races.
pub const NUM_RACES: usize = 3;
/// Length of the covariate vector `x_t` (constant, Black, Hispanic, female,
/// achiever, mother attended college).
pub const NUM_COVARIATES: usize = 6;

/// Default label of the achievement covariate.
pub const DEFAULT_ACHIEVER_LABEL: &str = "Course grade: A";

/// Row labels of the covariate block of the utility coefficients.
pub fn covariate_names(achiever_label: &str) -> [String; NUM_COVARIATES] {
    [
        "Constant".to_string(),
        "Black".to_string(),
        "Hispanic".to_string(),
        "Female".to_string(),
        achiever_label.to_string(),
        "Mother attended college".to_string(),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Race {
    White,
    Black,
    Hispanic,
}

impl Race {
    pub const ALL: [Race; NUM_RACES] = [Race::White, Race::Black, Race::Hispanic];

    pub fn code(self) -> usize {
        match self {
            Race::White => 0,
            Race::Black => 1,
            Race::Hispanic => 2,
        }
    }

    pub fn from_code(code: usize) -> Option<Race> {
        Race::ALL.get(code).copied()
    }

    pub fn letter(self) -> char {
        match self {
            Race::White => 'W',
            Race::Black => 'B',
            Race::Hispanic => 'H',
        }
    }
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Race {
    type Err = Error;

    fn from_str(s: &str) -> Result<Race> {
        match s.trim() {
            "W" => Ok(Race::White),
            "B" => Ok(Race::Black),
            "H" => Ok(Race::Hispanic),
            other => Err(Error::InvalidInput(format!(
                "race must be one of W|B|H, got `{other}`"
            ))),
        }
    }
}

/// A 3x3 matrix indexed by (own race, classmate race).
pub type RaceMatrix = [[f64; NUM_RACES]; NUM_RACES];

/// Observable student profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StudentType {
    pub race: Race,
    pub female: bool,
    pub achiever: bool,
    pub mother_college: bool,
}

impl StudentType {
    pub fn new(race: Race, female: bool, achiever: bool, mother_college: bool) -> Self {
        StudentType {
            race,
            female,
            achiever,
            mother_college,
        }
    }

    /// `race * 8 + female * 4 + achiever * 2 + mother_college`.
    pub fn index(&self) -> usize {
        self.race.code() * 8
            + usize::from(self.female) * 4
            + usize::from(self.achiever) * 2
            + usize::from(self.mother_college)
    }

    /// Inverse of [`StudentType::index`]; `None` outside `[0, 24)`.
    pub fn from_index(index: usize) -> Option<Self> {
        let race = Race::from_code(index / 8)?;
        Some(StudentType {
            race,
            female: index & 4 != 0,
            achiever: index & 2 != 0,
            mother_college: index & 1 != 0,
        })
    }

    /// All 24 types in index order.
    pub fn all() -> impl Iterator<Item = StudentType> {
        (0..NUM_TYPES).map(|i| StudentType::from_index(i).expect("index in range"))
    }

    /// Covariate row `x_t` in the fixed layout
    /// {constant, Black, Hispanic, female, achiever, mother_college}.
    pub fn covariates(&self) -> [f64; NUM_COVARIATES] {
        let bit = |b: bool| if b { 1.0 } else { 0.0 };
        [
            1.0,
            bit(self.race == Race::Black),
            bit(self.race == Race::Hispanic),
            bit(self.female),
            bit(self.achiever),
            bit(self.mother_college),
        ]
    }
}

/// Race code of a type index.
#[inline]
pub fn race_of(type_index: usize) -> usize {
    type_index / 8
}

/// One row of the student CSV.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StudentRecord {
    pub student_id: u64,
    pub school_id: u32,
    pub cohort_id: u32,
    pub student_type: StudentType,
    /// Teacher encouraged the student to apply to college (`b`).
    pub encouraged: bool,
    /// Student took the college-prep coursework (`a`).
    pub took_prep: bool,
}

/// Per-type counts of one graduating class in one school.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classroom {
    pub school_id: u32,
    pub cohort_id: u32,
    pub counts: [u32; NUM_TYPES],
}

impl Classroom {
    pub fn new(school_id: u32, cohort_id: u32, counts: [u32; NUM_TYPES]) -> Result<Self> {
        let c = Classroom {
            school_id,
            cohort_id,
            counts,
        };
        if c.size() == 0 {
            return Err(Error::InvalidInput(format!(
                "class school={school_id} cohort={cohort_id} has no students"
            )));
        }
        Ok(c)
    }

    /// Total number of students `N`.
    pub fn size(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn key(&self) -> (u32, u32) {
        (self.school_id, self.cohort_id)
    }

    /// Counts as reals, for the fractional-composition code paths.
    pub fn counts_f64(&self) -> [f64; NUM_TYPES] {
        self.counts.map(f64::from)
    }

    /// Type indices with at least one student, ascending.
    pub fn present_types(&self) -> Vec<usize> {
        (0..NUM_TYPES).filter(|&t| self.counts[t] > 0).collect()
    }

    /// Per-race student counts.
    pub fn race_counts(&self) -> [u32; NUM_RACES] {
        let mut out = [0; NUM_RACES];
        for (t, &n) in self.counts.iter().enumerate() {
            out[race_of(t)] += n;
        }
        out
    }

    /// Share of classmates of each type seen by a student of type `observer`:
    /// `w_t' = (N_t' - 1{t' = observer}) / (N - 1)`.
    ///
    /// A singleton class has no classmates and yields the zero vector.
    pub fn class_weights(&self, observer: StudentType) -> Result<[f64; NUM_TYPES]> {
        let t = observer.index();
        if self.counts[t] == 0 {
            return Err(Error::NoObserver {
                type_index: t,
                school_id: self.school_id,
                cohort_id: self.cohort_id,
            });
        }
        Ok(weights_from_counts(&self.counts_f64(), t))
    }
}

/// Classmate shares from (possibly fractional) counts. Zero when `N <= 1`.
pub fn weights_from_counts(counts: &[f64; NUM_TYPES], observer: usize) -> [f64; NUM_TYPES] {
    let n: f64 = counts.iter().sum();
    let mut w = [0.0; NUM_TYPES];
    if n <= 1.0 {
        return w;
    }
    let denom = n - 1.0;
    for (t, wt) in w.iter_mut().enumerate() {
        let own = if t == observer { 1.0 } else { 0.0 };
        *wt = ((counts[t] - own) / denom).max(0.0);
    }
    w
}

/// Classmate weights aggregated to race shares.
pub fn race_weights(w: &[f64; NUM_TYPES]) -> [f64; NUM_RACES] {
    let mut out = [0.0; NUM_RACES];
    for (t, &x) in w.iter().enumerate() {
        out[race_of(t)] += x;
    }
    out
}

/// All classrooms of a school system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchoolSystem {
    pub classrooms: Vec<Classroom>,
}

impl SchoolSystem {
    /// Builds a system, checking that `(school, cohort)` pairs are unique
    /// and every class is non-empty. Classrooms are kept sorted by key.
    pub fn new(mut classrooms: Vec<Classroom>) -> Result<Self> {
        classrooms.sort_by_key(|c| c.key());
        for pair in classrooms.windows(2) {
            if pair[0].key() == pair[1].key() {
                return Err(Error::InvalidInput(format!(
                    "duplicate classroom school={} cohort={}",
                    pair[0].school_id, pair[0].cohort_id
                )));
            }
        }
        if let Some(c) = classrooms.iter().find(|c| c.size() == 0) {
            return Err(Error::InvalidInput(format!(
                "class school={} cohort={} has no students",
                c.school_id, c.cohort_id
            )));
        }
        Ok(SchoolSystem { classrooms })
    }

    /// Aggregates records by (school, cohort, type).
    pub fn from_records(records: &[StudentRecord]) -> Result<Self> {
        let mut map: BTreeMap<(u32, u32), [u32; NUM_TYPES]> = BTreeMap::new();
        for r in records {
            map.entry((r.school_id, r.cohort_id))
                .or_insert([0; NUM_TYPES])[r.student_type.index()] += 1;
        }
        SchoolSystem::new(
            map.into_iter()
                .map(|((s, g), counts)| Classroom {
                    school_id: s,
                    cohort_id: g,
                    counts,
                })
                .collect(),
        )
    }

    /// Distinct school ids, ascending. The first one is the normalized school.
    pub fn school_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.classrooms.iter().map(|c| c.school_id).collect();
        set.into_iter().collect()
    }

    /// Distinct cohort ids, ascending. The first one is the normalized cohort.
    pub fn cohort_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.classrooms.iter().map(|c| c.cohort_id).collect();
        set.into_iter().collect()
    }

    pub fn total_students(&self) -> u64 {
        self.classrooms.iter().map(|c| u64::from(c.size())).sum()
    }

    pub fn find(&self, school_id: u32, cohort_id: u32) -> Option<&Classroom> {
        self.classrooms
            .binary_search_by_key(&(school_id, cohort_id), |c| c.key())
            .ok()
            .map(|i| &self.classrooms[i])
    }
}

fn effect_of(map: &BTreeMap<u32, f64>, id: u32) -> f64 {
    map.get(&id).copied().unwrap_or(0.0)
}

/// Teacher utility coefficients.
///
/// Fixed effects are keyed by cohort / school id; a missing key is the
/// normalized effect 0. `rho[r1][r2]` is the weight a teacher puts on the
/// share of race-`r2` classmates of a race-`r1` student; the White column
/// is normalized to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherParams {
    pub delta: [f64; NUM_COVARIATES],
    #[serde(default)]
    pub xi: BTreeMap<u32, f64>,
    #[serde(default)]
    pub zeta: BTreeMap<u32, f64>,
    pub rho: RaceMatrix,
}

impl TeacherParams {
    pub fn zero() -> Self {
        TeacherParams {
            delta: [0.0; NUM_COVARIATES],
            xi: BTreeMap::new(),
            zeta: BTreeMap::new(),
            rho: [[0.0; NUM_RACES]; NUM_RACES],
        }
    }

    /// Point estimates of the teacher equation reported for the Texas
    /// survey; fixed effects at zero.
    pub fn table3() -> Self {
        TeacherParams {
            delta: [-2.763, -0.052, -0.247, 0.168, 0.415, 0.551],
            xi: BTreeMap::new(),
            zeta: BTreeMap::new(),
            rho: [
                [0.0, 0.810, 0.361],
                [0.0, 0.647, 1.008],
                [0.0, 0.386, 1.158],
            ],
        }
    }

    pub fn cohort_effect(&self, cohort_id: u32) -> f64 {
        effect_of(&self.xi, cohort_id)
    }

    pub fn school_effect(&self, school_id: u32) -> f64 {
        effect_of(&self.zeta, school_id)
    }

    /// Checks the White-column normalization and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.rho.iter().any(|row| row[Race::White.code()] != 0.0) {
            return Err(Error::InvalidInput(
                "rho White column must be zero (rho_WW = rho_BW = rho_HW = 0)".into(),
            ));
        }
        let finite = self.delta.iter().all(|v| v.is_finite())
            && self.rho.iter().flatten().all(|v| v.is_finite())
            && self
                .xi
                .values()
                .chain(self.zeta.values())
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("teacher parameters".into()));
        }
        Ok(())
    }
}

/// Student utility coefficients. `lambda[r1][r2]` is the weight a race-`r1`
/// student puts on the expected choices of race-`r2` classmates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentParams {
    pub beta: [f64; NUM_COVARIATES],
    pub alpha: f64,
    #[serde(default)]
    pub kappa: BTreeMap<u32, f64>,
    #[serde(default)]
    pub gamma: BTreeMap<u32, f64>,
    pub lambda: RaceMatrix,
}

impl StudentParams {
    pub fn zero() -> Self {
        StudentParams {
            beta: [0.0; NUM_COVARIATES],
            alpha: 0.0,
            kappa: BTreeMap::new(),
            gamma: BTreeMap::new(),
            lambda: [[0.0; NUM_RACES]; NUM_RACES],
        }
    }

    /// Point estimates of the student equation reported for the Texas
    /// survey; fixed effects at zero.
    pub fn table3() -> Self {
        StudentParams {
            beta: [-0.842, 1.237, 0.411, 0.095, 0.725, 0.643],
            alpha: 0.535,
            kappa: BTreeMap::new(),
            gamma: BTreeMap::new(),
            lambda: [
                [3.561, 2.770, -1.123],
                [1.479, 0.755, -2.858],
                [2.367, 1.804, -1.002],
            ],
        }
    }

    pub fn cohort_effect(&self, cohort_id: u32) -> f64 {
        effect_of(&self.kappa, cohort_id)
    }

    pub fn school_effect(&self, school_id: u32) -> f64 {
        effect_of(&self.gamma, school_id)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.beta.iter().all(|v| v.is_finite())
            && self.alpha.is_finite()
            && self.lambda.iter().flatten().all(|v| v.is_finite())
            && self
                .kappa
                .values()
                .chain(self.gamma.values())
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("student parameters".into()));
        }
        Ok(())
    }
}

/// Linear index `x_t . coef`.
pub fn linear_index(t: usize, coef: &[f64; NUM_COVARIATES]) -> f64 {
    let x = StudentType::from_index(t)
        .expect("type index in range")
        .covariates();
    x.iter().zip(coef).map(|(a, b)| a * b).sum()
}
