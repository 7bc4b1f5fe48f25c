//! Hospitalization records and the record-level train/test split.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::patient_model::{AdmissionFeatures, AB_DAYS_MAX, ICU_DAYS_MAX};
use crate::rng::SimRng;
use crate::simulators::{SimulatedSequence, TestEvent, TestType};

/// One observed stay: admission features and the tests in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HospitalizationRecord {
    pub record_id: String,
    pub alpha: AdmissionFeatures,
    pub events: Vec<TestEvent>,
}

impl HospitalizationRecord {
    pub fn from_sequence(record_id: impl Into<String>, seq: SimulatedSequence) -> Self {
        Self {
            record_id: record_id.into(),
            alpha: seq.alpha,
            events: seq.events,
        }
    }

    pub fn validate(&self) -> Result<(), RejectReason> {
        validate_parts(&self.alpha, &self.events)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectCode {
    /// No tests in the record.
    EmptyRecord,
    /// Admission features out of range.
    AlphaInvalid,
    /// A delay after the first test is not a positive finite number.
    NonpositiveDelay,
    /// The first test carries a nonzero delay.
    FirstDelay,
    /// Antibiotic or ICU day count outside its window.
    BetaBounds,
    /// A culture test recorded as negative.
    CultureNeg,
    /// CSV rows of one record disagree on admission features.
    AlphaInconsistent,
    /// CSV test indices are not 0, 1, 2, ... in order.
    TestOrder,
    /// The record id was already seen in this file.
    DuplicateId,
}

impl RejectCode {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectCode::EmptyRecord => "EMPTY_RECORD",
            RejectCode::AlphaInvalid => "ALPHA_INVALID",
            RejectCode::NonpositiveDelay => "NONPOSITIVE_DELAY",
            RejectCode::FirstDelay => "FIRST_DELAY",
            RejectCode::BetaBounds => "BETA_BOUNDS",
            RejectCode::CultureNeg => "CULTURE_NEG",
            RejectCode::AlphaInconsistent => "ALPHA_INCONSISTENT",
            RejectCode::TestOrder => "TEST_ORDER",
            RejectCode::DuplicateId => "DUPLICATE_ID",
        }
    }
}

impl std::fmt::Display for RejectCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectReason {
    pub code: RejectCode,
    pub detail: String,
}

impl RejectReason {
    pub fn new(code: RejectCode, detail: impl Into<String>) -> Self {
        Self {
            code,
            detail: detail.into(),
        }
    }
}

/// Record invariants shared by every reader. β counts arrive as signed
/// integers so that negative values are rejected rather than unparsable.
pub(crate) fn validate_parts(alpha: &AdmissionFeatures, events: &[TestEvent]) -> Result<(), RejectReason> {
    if let Err(e) = alpha.validate() {
        return Err(RejectReason::new(RejectCode::AlphaInvalid, e.to_string()));
    }
    if events.is_empty() {
        return Err(RejectReason::new(RejectCode::EmptyRecord, "no tests"));
    }
    for (i, e) in events.iter().enumerate() {
        if i == 0 {
            if e.delay_before != 0.0 {
                return Err(RejectReason::new(
                    RejectCode::FirstDelay,
                    format!("test 0 has delay_before {}", e.delay_before),
                ));
            }
        } else if !(e.delay_before > 0.0) || !e.delay_before.is_finite() {
            return Err(RejectReason::new(
                RejectCode::NonpositiveDelay,
                format!("test {i} has delay_before {}", e.delay_before),
            ));
        }
        check_beta_bounds(i, i64::from(e.beta.ab_days_30), i64::from(e.beta.icu_days_7))?;
        if e.test_type == TestType::Culture && !e.result {
            return Err(RejectReason::new(RejectCode::CultureNeg, format!("test {i} is a negative culture")));
        }
    }
    Ok(())
}

pub(crate) fn check_beta_bounds(i: usize, ab: i64, icu: i64) -> Result<(), RejectReason> {
    if !(0..=i64::from(AB_DAYS_MAX)).contains(&ab) {
        return Err(RejectReason::new(
            RejectCode::BetaBounds,
            format!("test {i} has ab_days_30 {ab} outside [0, {AB_DAYS_MAX}]"),
        ));
    }
    if !(0..=i64::from(ICU_DAYS_MAX)).contains(&icu) {
        return Err(RejectReason::new(
            RejectCode::BetaBounds,
            format!("test {i} has icu_days_7 {icu} outside [0, {ICU_DAYS_MAX}]"),
        ));
    }
    Ok(())
}

/// Shuffle records with `seed` and cut at `round(ratio * n)`.
pub fn split(records: &[HospitalizationRecord], ratio: f64, seed: u64) -> (Vec<HospitalizationRecord>, Vec<HospitalizationRecord>) {
    assert!(ratio > 0.0 && ratio < 1.0, "split ratio {ratio} outside (0, 1)");
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut SimRng::new(seed));
    let cut = (ratio * records.len() as f64).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    (pick(&order[..cut]), pick(&order[cut..]))
}
