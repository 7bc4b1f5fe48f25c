//! Admission (α) and test-time (β) features, and the conditioning vector
//! each of the thirteen sub-programs receives.
//!
//! Layout conventions:
//!
//! | field              | encoding                         |
//! |--------------------|----------------------------------|
//! | gender             | bit                              |
//! | age                | years / 100                      |
//! | admission type     | one-hot: emergency, elective, newborn, other |
//! | five history flags | bit each                         |
//! | antibiotic days    | days / 30                        |
//! | ICU days           | days / 7                         |
//! | dialysis           | bit                              |
//! | previous delay     | ln(1 + days)                     |
//!
//! Every vector starts with the 11 α entries, then the previous-step block
//! (β of the previous test, its result, the delay since it) when the
//! sub-program is conditioned on it, then entries of the current test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bit;

pub const ALPHA_DIM: usize = 11;
pub const BETA_DIM: usize = 3;
pub const MAX_AGE_YEARS: f64 = 120.0;
pub const AB_DAYS_MAX: u32 = 30;
pub const ICU_DAYS_MAX: u32 = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("invalid field {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("{subprogram} needs context field {field}")]
    MissingContext { subprogram: &'static str, field: &'static str },
    #[error("unknown sub-program {0}")]
    UnknownSubProgram(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionType {
    Emergency,
    Elective,
    Newborn,
    Other,
}

impl AdmissionType {
    pub const ALL: [AdmissionType; 4] = [Self::Emergency, Self::Elective, Self::Newborn, Self::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Emergency => "emergency",
            Self::Elective => "elective",
            Self::Newborn => "newborn",
            Self::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

/// Features observable at admission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmissionFeatures {
    #[serde(with = "bit")]
    pub gender: bool,
    pub age_years: f64,
    pub admission_type: AdmissionType,
    #[serde(with = "bit")]
    pub from_healthcare_facility: bool,
    #[serde(with = "bit")]
    pub cerebrovascular_history: bool,
    #[serde(with = "bit")]
    pub diabetes: bool,
    #[serde(with = "bit")]
    pub hospitalized_past_90d: bool,
    #[serde(with = "bit")]
    pub mrsa_positive_past_90d: bool,
}

impl Default for AdmissionFeatures {
    fn default() -> Self {
        Self {
            gender: false,
            age_years: 0.0,
            admission_type: AdmissionType::Emergency,
            from_healthcare_facility: false,
            cerebrovascular_history: false,
            diabetes: false,
            hospitalized_past_90d: false,
            mrsa_positive_past_90d: false,
        }
    }
}

impl AdmissionFeatures {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !self.age_years.is_finite() || !(0.0..=MAX_AGE_YEARS).contains(&self.age_years) {
            return Err(FeatureError::Invalid {
                field: "age_years",
                reason: format!("{} outside [0, {MAX_AGE_YEARS}]", self.age_years),
            });
        }
        Ok(())
    }
}

/// Features observed at the time of a test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TestTimeFeatures {
    pub ab_days_30: u32,
    pub icu_days_7: u32,
    #[serde(with = "bit")]
    pub dialysis_7d: bool,
}

impl TestTimeFeatures {
    pub fn new(ab_days_30: u32, icu_days_7: u32, dialysis_7d: bool) -> Self {
        Self {
            ab_days_30,
            icu_days_7,
            dialysis_7d,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.ab_days_30 > AB_DAYS_MAX {
            return Err(FeatureError::Invalid {
                field: "ab_days_30",
                reason: format!("{} > {AB_DAYS_MAX}", self.ab_days_30),
            });
        }
        if self.icu_days_7 > ICU_DAYS_MAX {
            return Err(FeatureError::Invalid {
                field: "icu_days_7",
                reason: format!("{} > {ICU_DAYS_MAX}", self.icu_days_7),
            });
        }
        Ok(())
    }
}

/// The thirteen sub-programs of the sequence model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubProgramId {
    #[serde(rename = "D_beta_1_ab")]
    Beta1Ab,
    #[serde(rename = "D_beta_1_icu")]
    Beta1Icu,
    #[serde(rename = "D_beta_1_dia")]
    Beta1Dia,
    #[serde(rename = "D_t_1")]
    T1,
    #[serde(rename = "D_r_1")]
    R1,
    #[serde(rename = "D_cont")]
    Cont,
    #[serde(rename = "D_d_neg")]
    DelayNeg,
    #[serde(rename = "D_d_pos")]
    DelayPos,
    #[serde(rename = "D_beta_i_ab")]
    BetaIAb,
    #[serde(rename = "D_beta_i_icu")]
    BetaIIcu,
    #[serde(rename = "D_beta_i_dia")]
    BetaIDia,
    #[serde(rename = "D_t_i")]
    TI,
    #[serde(rename = "D_r_i")]
    RI,
}

impl SubProgramId {
    pub const ALL: [SubProgramId; 13] = [
        Self::Beta1Ab,
        Self::Beta1Icu,
        Self::Beta1Dia,
        Self::T1,
        Self::R1,
        Self::Cont,
        Self::DelayNeg,
        Self::DelayPos,
        Self::BetaIAb,
        Self::BetaIIcu,
        Self::BetaIDia,
        Self::TI,
        Self::RI,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Beta1Ab => "D_beta_1_ab",
            Self::Beta1Icu => "D_beta_1_icu",
            Self::Beta1Dia => "D_beta_1_dia",
            Self::T1 => "D_t_1",
            Self::R1 => "D_r_1",
            Self::Cont => "D_cont",
            Self::DelayNeg => "D_d_neg",
            Self::DelayPos => "D_d_pos",
            Self::BetaIAb => "D_beta_i_ab",
            Self::BetaIIcu => "D_beta_i_icu",
            Self::BetaIDia => "D_beta_i_dia",
            Self::TI => "D_t_i",
            Self::RI => "D_r_i",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, FeatureError> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == name)
            .ok_or_else(|| FeatureError::UnknownSubProgram(name.to_string()))
    }

    fn blocks(self) -> &'static [Block] {
        use Block::*;
        match self {
            Self::Beta1Ab => &[Alpha],
            Self::Beta1Icu => &[Alpha, CurAb],
            Self::Beta1Dia => &[Alpha, CurAb, CurIcu],
            Self::T1 | Self::R1 | Self::DelayNeg | Self::DelayPos => &[Alpha, CurAb, CurIcu, CurDia],
            Self::Cont => &[Alpha, CurAb, CurIcu, CurDia, CurResult],
            Self::BetaIAb => &[Alpha, PrevBeta, PrevResult, PrevDelay],
            Self::BetaIIcu => &[Alpha, PrevBeta, PrevResult, PrevDelay, CurAb],
            Self::BetaIDia => &[Alpha, PrevBeta, PrevResult, PrevDelay, CurAb, CurIcu],
            Self::TI | Self::RI => &[Alpha, CurAb, CurIcu, CurDia, PrevResult, PrevDelay],
        }
    }

    /// Length of this sub-program's conditioning vector.
    pub fn input_dim(self) -> usize {
        self.blocks().iter().map(|b| b.dim()).sum()
    }

    /// Ordered field names of the conditioning vector.
    pub fn layout(self) -> Vec<&'static str> {
        self.blocks().iter().flat_map(|b| b.fields().iter().copied()).collect()
    }

    /// Layout field naming the quantity this sub-program generates.
    pub fn output_field(self) -> &'static str {
        match self {
            Self::Beta1Ab | Self::BetaIAb => "beta.ab_days_30",
            Self::Beta1Icu | Self::BetaIIcu => "beta.icu_days_7",
            Self::Beta1Dia | Self::BetaIDia => "beta.dialysis_7d",
            Self::T1 | Self::TI => "test_type",
            Self::R1 | Self::RI => "result",
            Self::Cont => "cont",
            Self::DelayNeg | Self::DelayPos => "delay",
        }
    }
}

impl std::fmt::Display for SubProgramId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Alpha,
    PrevBeta,
    PrevResult,
    PrevDelay,
    CurAb,
    CurIcu,
    CurDia,
    CurResult,
}

const ALPHA_FIELDS: [&str; ALPHA_DIM] = [
    "alpha.gender",
    "alpha.age_div_100",
    "alpha.admission.emergency",
    "alpha.admission.elective",
    "alpha.admission.newborn",
    "alpha.admission.other",
    "alpha.from_healthcare_facility",
    "alpha.cerebrovascular_history",
    "alpha.diabetes",
    "alpha.hospitalized_past_90d",
    "alpha.mrsa_positive_past_90d",
];
const PREV_BETA_FIELDS: [&str; BETA_DIM] = ["beta_prev.ab_days_30", "beta_prev.icu_days_7", "beta_prev.dialysis_7d"];

impl Block {
    fn fields(self) -> &'static [&'static str] {
        match self {
            Block::Alpha => &ALPHA_FIELDS,
            Block::PrevBeta => &PREV_BETA_FIELDS,
            Block::PrevResult => &["result_prev"],
            Block::PrevDelay => &["ln1p_delay_prev"],
            Block::CurAb => &["beta.ab_days_30"],
            Block::CurIcu => &["beta.icu_days_7"],
            Block::CurDia => &["beta.dialysis_7d"],
            Block::CurResult => &["result"],
        }
    }

    fn dim(self) -> usize {
        self.fields().len()
    }
}

/// A β under construction within one test step (ab, then icu, then dialysis).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PartialBeta {
    pub ab: Option<u32>,
    pub icu: Option<u32>,
    pub dia: Option<bool>,
}

impl PartialBeta {
    pub fn complete(beta: TestTimeFeatures) -> Self {
        Self {
            ab: Some(beta.ab_days_30),
            icu: Some(beta.icu_days_7),
            dia: Some(beta.dialysis_7d),
        }
    }

    pub fn finish(&self) -> Option<TestTimeFeatures> {
        Some(TestTimeFeatures::new(self.ab?, self.icu?, self.dia?))
    }
}

/// Everything a sub-program may be conditioned on at one point of a sequence.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub alpha: &'a AdmissionFeatures,
    pub beta_prev: Option<TestTimeFeatures>,
    pub r_prev: Option<bool>,
    pub d_prev: Option<f64>,
    /// β of the current test, possibly still being sampled.
    pub beta: PartialBeta,
    /// Result of the current test (consumed by the continuation model).
    pub result: Option<bool>,
}

impl<'a> StepContext<'a> {
    pub fn first(alpha: &'a AdmissionFeatures) -> Self {
        Self {
            alpha,
            beta_prev: None,
            r_prev: None,
            d_prev: None,
            beta: PartialBeta::default(),
            result: None,
        }
    }

    pub fn after(alpha: &'a AdmissionFeatures, beta_prev: TestTimeFeatures, r_prev: bool, d_prev: f64) -> Self {
        Self {
            alpha,
            beta_prev: Some(beta_prev),
            r_prev: Some(r_prev),
            d_prev: Some(d_prev),
            beta: PartialBeta::default(),
            result: None,
        }
    }
}

/// A real vector paired with its field layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector {
    pub values: Vec<f64>,
    pub layout: Vec<&'static str>,
}

impl EncodedVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn b(x: bool) -> f64 {
    if x {
        1.0
    } else {
        0.0
    }
}

fn push_alpha(alpha: &AdmissionFeatures, out: &mut Vec<f64>) {
    out.push(b(alpha.gender));
    out.push(alpha.age_years / 100.0);
    let mut onehot = [0.0; 4];
    onehot[alpha.admission_type.index()] = 1.0;
    out.extend_from_slice(&onehot);
    out.push(b(alpha.from_healthcare_facility));
    out.push(b(alpha.cerebrovascular_history));
    out.push(b(alpha.diabetes));
    out.push(b(alpha.hospitalized_past_90d));
    out.push(b(alpha.mrsa_positive_past_90d));
}

fn push_beta(beta: &TestTimeFeatures, out: &mut Vec<f64>) {
    out.push(beta.ab_days_30 as f64 / AB_DAYS_MAX as f64);
    out.push(beta.icu_days_7 as f64 / ICU_DAYS_MAX as f64);
    out.push(b(beta.dialysis_7d));
}

pub fn encode_alpha(alpha: &AdmissionFeatures) -> EncodedVector {
    let mut values = Vec::with_capacity(ALPHA_DIM);
    push_alpha(alpha, &mut values);
    EncodedVector {
        values,
        layout: ALPHA_FIELDS.to_vec(),
    }
}

pub fn encode_beta(beta: &TestTimeFeatures) -> EncodedVector {
    let mut values = Vec::with_capacity(BETA_DIM);
    push_beta(beta, &mut values);
    EncodedVector {
        values,
        layout: vec!["beta.ab_days_30", "beta.icu_days_7", "beta.dialysis_7d"],
    }
}

/// Append the conditioning vector of `id` to `out`.
pub fn encode_into(id: SubProgramId, ctx: &StepContext<'_>, out: &mut Vec<f64>) -> Result<(), FeatureError> {
    let missing = |field| FeatureError::MissingContext {
        subprogram: id.name(),
        field,
    };
    for block in id.blocks() {
        match block {
            Block::Alpha => push_alpha(ctx.alpha, out),
            Block::PrevBeta => push_beta(ctx.beta_prev.as_ref().ok_or_else(|| missing("beta_prev"))?, out),
            Block::PrevResult => out.push(b(ctx.r_prev.ok_or_else(|| missing("r_prev"))?)),
            Block::PrevDelay => {
                let d = ctx.d_prev.ok_or_else(|| missing("d_prev"))?;
                if !(d >= 0.0) || !d.is_finite() {
                    return Err(FeatureError::Invalid {
                        field: "d_prev",
                        reason: format!("{d} is not a nonnegative delay"),
                    });
                }
                out.push(d.ln_1p());
            }
            Block::CurAb => out.push(ctx.beta.ab.ok_or_else(|| missing("beta.ab_days_30"))? as f64 / AB_DAYS_MAX as f64),
            Block::CurIcu => out.push(ctx.beta.icu.ok_or_else(|| missing("beta.icu_days_7"))? as f64 / ICU_DAYS_MAX as f64),
            Block::CurDia => out.push(b(ctx.beta.dia.ok_or_else(|| missing("beta.dialysis_7d"))?)),
            Block::CurResult => out.push(b(ctx.result.ok_or_else(|| missing("result"))?)),
        }
    }
    Ok(())
}

pub fn conditioning_vector(id: SubProgramId, ctx: &StepContext<'_>) -> Result<EncodedVector, FeatureError> {
    let mut values = Vec::with_capacity(id.input_dim());
    encode_into(id, ctx, &mut values)?;
    Ok(EncodedVector {
        values,
        layout: id.layout(),
    })
}

/// One row of the exported layout table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub fields: Vec<String>,
    pub dim: usize,
}

pub fn layout_table() -> Vec<LayoutEntry> {
    SubProgramId::ALL
        .iter()
        .map(|id| LayoutEntry {
            name: id.name().to_string(),
            fields: id.layout().into_iter().map(String::from).collect(),
            dim: id.input_dim(),
        })
        .collect()
}
