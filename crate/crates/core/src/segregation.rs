//! Theil entropy score and segregation index, in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SchoolSystem, NUM_RACES};

const SHARE_TOL: f64 = 1e-9;

/// `-sum p ln p` with `0 ln 0 = 0`. Shares must be non-negative and sum to
/// one within 1e-9.
pub fn state_entropy(shares: &[f64]) -> Result<f64> {
    if shares.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidInput(format!("invalid shares {shares:?}")));
    }
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > SHARE_TOL {
        return Err(Error::InvalidInput(format!("shares sum to {total}, not 1")));
    }
    Ok(entropy_unchecked(shares))
}

/// Same measure as [`state_entropy`], applied to one unit's race shares.
pub fn school_entropy(shares: &[f64]) -> Result<f64> {
    state_entropy(shares)
}

pub(crate) fn entropy_unchecked(shares: &[f64]) -> f64 {
    -shares
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn shares_of(counts: &[f64; NUM_RACES]) -> [f64; NUM_RACES] {
    let n: f64 = counts.iter().sum();
    counts.map(|c| c / n)
}

/// Unit of `g` in the index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyUnit {
    /// Each graduating class is its own unit.
    #[default]
    Classroom,
    /// Classes of a school are pooled across cohorts.
    School,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub unit: EntropyUnit,
    /// `(school_id, cohort_id)` per unit; cohort is `None` at school level.
    pub units: Vec<(u32, Option<u32>)>,
    pub state_entropy: f64,
    pub school_entropy: Vec<f64>,
    pub index: f64,
    pub race_shares: [f64; NUM_RACES],
    pub class_weights_pop: Vec<f64>,
}

/// Race counts per unit.
pub fn unit_race_counts(
    system: &SchoolSystem,
    unit: EntropyUnit,
) -> (Vec<(u32, Option<u32>)>, Vec<[f64; NUM_RACES]>) {
    let mut ids = Vec::new();
    let mut counts: Vec<[f64; NUM_RACES]> = Vec::new();
    for c in &system.classrooms {
        let rc = c.race_counts().map(f64::from);
        let id = match unit {
            EntropyUnit::Classroom => (c.school_id, Some(c.cohort_id)),
            EntropyUnit::School => (c.school_id, None),
        };
        // classrooms are sorted by school, so pooling is a run merge
        if unit == EntropyUnit::School && ids.last() == Some(&id) {
            let last = counts.last_mut().unwrap();
            for r in 0..NUM_RACES {
                last[r] += rc[r];
            }
        } else {
            ids.push(id);
            counts.push(rc);
        }
    }
    (ids, counts)
}

/// Index `sum_g p_g (Hbar - H_g) / Hbar` from (possibly fractional) race
/// counts per unit. Returns `(index, Hbar, H_g, p_g, state shares)`.
pub fn index_from_counts(
    counts: &[[f64; NUM_RACES]],
) -> Result<(f64, f64, Vec<f64>, Vec<f64>, [f64; NUM_RACES])> {
    let mut state = [0.0; NUM_RACES];
    for c in counts {
        if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!("invalid race counts {c:?}")));
        }
        for r in 0..NUM_RACES {
            state[r] += c[r];
        }
    }
    let n: f64 = state.iter().sum();
    if n <= 0.0 {
        return Err(Error::EmptyDataset);
    }
    let state_shares = shares_of(&state);
    let hbar = entropy_unchecked(&state_shares);
    if hbar <= 0.0 {
        return Err(Error::EntropyUndefined);
    }
    let sizes: Vec<f64> = counts.iter().map(|c| c.iter().sum()).collect();
    let hg: Vec<f64> = counts
        .iter()
        .zip(&sizes)
        .map(|(c, &s)| {
            if s > 0.0 {
                entropy_unchecked(&shares_of(c))
            } else {
                0.0
            }
        })
        .collect();
    // numerator and denominator share one summation order, so mirrored
    // units give exactly 0 and monoracial units exactly 1
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, h) in sizes.iter().zip(&hg) {
        num += s * hbar - s * h;
        den += s * hbar;
    }
    let index = (num / den).clamp(0.0, 1.0);
    let weights = sizes.iter().map(|s| s / n).collect();
    Ok((index, hbar, hg, weights, state_shares))
}

/// Entropy index of a system with in-sample enrollment weights.
pub fn entropy_index(system: &SchoolSystem, unit: EntropyUnit) -> Result<EntropyReport> {
    if system.classrooms.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (units, counts) = unit_race_counts(system, unit);
    let (index, hbar, hg, pg, shares) = index_from_counts(&counts)?;
    Ok(EntropyReport {
        unit,
        units,
        state_entropy: hbar,
        school_entropy: hg,
        index,
        race_shares: shares,
        class_weights_pop: pg,
    })
}
