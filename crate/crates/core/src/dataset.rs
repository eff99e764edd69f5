//! Student-record CSV ingestion, per-class cell aggregation and dataset
//! validation.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classroom, Race, SchoolSystem, StudentRecord, StudentType, NUM_TYPES};

pub const CSV_HEADER: [&str; 9] = [
    "student_id",
    "school_id",
    "cohort_id",
    "race",
    "female",
    "achiever",
    "mother_college",
    "encouraged",
    "took_prep",
];

/// Minimum school enrollment below which a size warning is emitted.
pub const MIN_SCHOOL_SIZE: u32 = 100;

/// A CSV row that could not be parsed. `line` is 1-based and counts the
/// header as line 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MalformedRow {
    pub line: usize,
    pub message: String,
}

/// Result of a lenient CSV read.
#[derive(Clone, Debug, Default)]
pub struct ParsedRecords {
    pub records: Vec<StudentRecord>,
    pub malformed: Vec<MalformedRow>,
}

fn parse_bit(field: &str, name: &str) -> std::result::Result<bool, String> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(format!("{name} must be 0|1, got `{other}`")),
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, name: &str) -> std::result::Result<T, String> {
    field.trim().parse().map_err(|_| {
        format!(
            "{name} must be a non-negative integer, got `{}`",
            field.trim()
        )
    })
}

fn parse_row(row: &csv::StringRecord) -> std::result::Result<StudentRecord, String> {
    if row.len() != CSV_HEADER.len() {
        return Err(format!(
            "expected {} fields, found {}",
            CSV_HEADER.len(),
            row.len()
        ));
    }
    let race: Race = row[3].parse().map_err(|e: Error| e.to_string())?;
    Ok(StudentRecord {
        student_id: parse_num(&row[0], "student_id")?,
        school_id: parse_num(&row[1], "school_id")?,
        cohort_id: parse_num(&row[2], "cohort_id")?,
        student_type: StudentType::new(
            race,
            parse_bit(&row[4], "female")?,
            parse_bit(&row[5], "achiever")?,
            parse_bit(&row[6], "mother_college")?,
        ),
        encouraged: parse_bit(&row[7], "encouraged")?,
        took_prep: parse_bit(&row[8], "took_prep")?,
    })
}

/// Reads records, collecting malformed rows instead of failing on them.
/// A wrong header is a hard error.
pub fn read_records_lenient<R: Read>(reader: R) -> Result<ParsedRecords> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != CSV_HEADER {
        return Err(Error::InvalidInput(format!(
            "unexpected CSV header `{}`; expected `{}`",
            found.join(","),
            CSV_HEADER.join(",")
        )));
    }
    let mut out = ParsedRecords::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        match row {
            Ok(row) => match parse_row(&row) {
                Ok(rec) => out.records.push(rec),
                Err(message) => out.malformed.push(MalformedRow { line, message }),
            },
            Err(e) => out.malformed.push(MalformedRow {
                line,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Reads records, failing on the first malformed row.
pub fn read_records<R: Read>(reader: R) -> Result<Vec<StudentRecord>> {
    let parsed = read_records_lenient(reader)?;
    if let Some(bad) = parsed.malformed.first() {
        return Err(Error::InvalidInput(format!(
            "line {}: {}",
            bad.line, bad.message
        )));
    }
    Ok(parsed.records)
}

pub fn write_records<W: Write>(writer: W, records: &[StudentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    let bit = |b: bool| if b { "1" } else { "0" };
    for r in records {
        let t = r.student_type;
        w.write_record([
            r.student_id.to_string().as_str(),
            r.school_id.to_string().as_str(),
            r.cohort_id.to_string().as_str(),
            t.race.letter().to_string().as_str(),
            bit(t.female),
            bit(t.achiever),
            bit(t.mother_college),
            bit(r.encouraged),
            bit(r.took_prep),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome tallies of one (class, type) cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub n: u32,
    /// Students with `b = 1`.
    pub encouraged: u32,
    /// Students with `a = 1`.
    pub took_prep: u32,
    /// Students with `b = 1` and `a = 1`.
    pub encouraged_took_prep: u32,
}

/// Records plus their aggregation into classrooms and outcome cells.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<StudentRecord>,
    pub system: SchoolSystem,
    /// `cells[k][t]` tallies type `t` in `system.classrooms[k]`.
    pub cells: Vec<[Cell; NUM_TYPES]>,
}

impl Dataset {
    pub fn from_records(records: Vec<StudentRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.student_id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate student_id {}",
                    r.student_id
                )));
            }
        }
        let system = SchoolSystem::from_records(&records)?;
        let mut cells = vec![[Cell::default(); NUM_TYPES]; system.classrooms.len()];
        let index: BTreeMap<(u32, u32), usize> = system
            .classrooms
            .iter()
            .enumerate()
            .map(|(k, c)| (c.key(), k))
            .collect();
        for r in &records {
            let k = index[&(r.school_id, r.cohort_id)];
            let cell = &mut cells[k][r.student_type.index()];
            cell.n += 1;
            cell.encouraged += u32::from(r.encouraged);
            cell.took_prep += u32::from(r.took_prep);
            cell.encouraged_took_prep += u32::from(r.encouraged && r.took_prep);
        }
        Ok(Dataset {
            records,
            system,
            cells,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn classrooms(&self) -> &[Classroom] {
        &self.system.classrooms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    /// CSV line, when the issue comes from a specific row.
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<ValidationIssue>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Cross-checks records against classroom aggregates.
///
/// `malformed` rows from a lenient read are carried into the error list.
/// Undersized schools and singleton classes only produce warnings.
pub fn validate_dataset(
    records: &[StudentRecord],
    system: &SchoolSystem,
    malformed: &[MalformedRow],
) -> ValidationReport {
    let mut report = ValidationReport::default();
    for m in malformed {
        report.errors.push(ValidationIssue {
            line: Some(m.line),
            message: m.message.clone(),
        });
    }

    let mut seen = HashSet::with_capacity(records.len());
    let mut tallies: BTreeMap<(u32, u32), [u32; NUM_TYPES]> = BTreeMap::new();
    for r in records {
        if !seen.insert(r.student_id) {
            report.errors.push(ValidationIssue {
                line: None,
                message: format!("duplicate student_id {}", r.student_id),
            });
        }
        if system.find(r.school_id, r.cohort_id).is_none() {
            report.errors.push(ValidationIssue {
                line: None,
                message: format!(
                    "student {} references unknown class school={} cohort={}",
                    r.student_id, r.school_id, r.cohort_id
                ),
            });
            continue;
        }
        tallies
            .entry((r.school_id, r.cohort_id))
            .or_insert([0; NUM_TYPES])[r.student_type.index()] += 1;
    }

    let mut school_sizes: BTreeMap<u32, u32> = BTreeMap::new();
    for c in &system.classrooms {
        let got = tallies.get(&c.key()).copied().unwrap_or([0; NUM_TYPES]);
        if got != c.counts {
            report.errors.push(ValidationIssue {
                line: None,
                message: format!(
                    "class school={} cohort={}: record counts do not match classroom counts",
                    c.school_id, c.cohort_id
                ),
            });
        }
        if c.size() == 1 {
            report.warnings.push(format!(
                "class school={} cohort={} has a single student; its social term is zero",
                c.school_id, c.cohort_id
            ));
        }
        *school_sizes.entry(c.school_id).or_default() += c.size();
    }
    for (school, size) in school_sizes {
        if size < MIN_SCHOOL_SIZE {
            report.warnings.push(format!(
                "school {school} has {size} students (< {MIN_SCHOOL_SIZE})"
            ));
        }
    }
    report
}
