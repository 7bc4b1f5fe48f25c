//! Ground-truth synthetic corpora.
//!
//! A [`SyntheticSpec`] fixes a covariate population and one parameter vector
//! per sub-program. Records are simulated from point-mass sub-programs at
//! those parameters, each on its own stream `split(seed, j)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::records::HospitalizationRecord;
use crate::patient_model::{AdmissionFeatures, AdmissionType, SubProgramId};
use crate::rigged::RiggedRegistry;
use crate::rng::SimRng;
use crate::simulators::{ParamMode, SimError, SimLimits, Simulator};
use crate::subprograms::{Family, FittedSubProgram, LocalMap, ParamLayout, Registry, SliceKind, SubProgramError, SubProgramSpec};

pub const TRUTH_FORMAT: &str = "genhai.truth";
pub const TRUTH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    SubProgram(#[from] SubProgramError),
    #[error("record {record}: {source}")]
    Sim {
        record: usize,
        #[source]
        source: SimError,
    },
}

/// Covariate distribution for admissions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Population {
    pub p_gender: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub age_min: f64,
    pub age_max: f64,
    /// Emergency, elective, newborn, other.
    pub admission_probs: [f64; 4],
    pub p_from_healthcare_facility: f64,
    pub p_cerebrovascular_history: f64,
    pub p_diabetes: f64,
    pub p_hospitalized_past_90d: f64,
    pub p_mrsa_positive_past_90d: f64,
}

impl Default for Population {
    fn default() -> Self {
        Self {
            p_gender: 0.5,
            age_mean: 60.0,
            age_sd: 18.0,
            age_min: 18.0,
            age_max: 100.0,
            admission_probs: [0.6, 0.25, 0.05, 0.1],
            p_from_healthcare_facility: 0.15,
            p_cerebrovascular_history: 0.1,
            p_diabetes: 0.3,
            p_hospitalized_past_90d: 0.3,
            p_mrsa_positive_past_90d: 0.08,
        }
    }
}

impl Population {
    /// Every binary at 1/2, a wide age spread and few newborns.
    pub fn balanced() -> Self {
        Self {
            age_mean: 50.0,
            age_sd: 60.0,
            age_min: 0.0,
            admission_probs: [0.3, 0.3, 0.1, 0.3],
            p_from_healthcare_facility: 0.5,
            p_cerebrovascular_history: 0.5,
            p_diabetes: 0.5,
            p_hospitalized_past_90d: 0.5,
            p_mrsa_positive_past_90d: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let probs = [
            self.p_gender,
            self.p_from_healthcare_facility,
            self.p_cerebrovascular_history,
            self.p_diabetes,
            self.p_hospitalized_past_90d,
            self.p_mrsa_positive_past_90d,
        ];
        if probs.iter().chain(&self.admission_probs).any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SyntheticError::Invalid("probabilities must lie in [0, 1]".into()));
        }
        if (self.admission_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SyntheticError::Invalid("admission_probs must sum to 1".into()));
        }
        if !(0.0 <= self.age_min && self.age_min <= self.age_max && self.age_max <= 120.0) || !(self.age_sd >= 0.0) {
            return Err(SyntheticError::Invalid("age range must satisfy 0 <= min <= max <= 120, sd >= 0".into()));
        }
        Ok(())
    }

    /// Newborn admissions have age 0; other ages are whole years from a
    /// clamped normal.
    pub fn sample(&self, rng: &mut SimRng) -> AdmissionFeatures {
        let mut bern = |p: f64| rng.open01() < p;
        let gender = bern(self.p_gender);
        let hcf = bern(self.p_from_healthcare_facility);
        let cer = bern(self.p_cerebrovascular_history);
        let dia = bern(self.p_diabetes);
        let hosp = bern(self.p_hospitalized_past_90d);
        let mrsa = bern(self.p_mrsa_positive_past_90d);
        let u = rng.open01();
        let mut acc = 0.0;
        let mut admission_type = AdmissionType::Other;
        for (t, p) in AdmissionType::ALL.iter().zip(self.admission_probs) {
            acc += p;
            if u < acc {
                admission_type = *t;
                break;
            }
        }
        let z = rng.standard_normal();
        let age_years = if admission_type == AdmissionType::Newborn {
            0.0
        } else {
            (self.age_mean + self.age_sd * z).clamp(self.age_min, self.age_max).round()
        };
        AdmissionFeatures {
            gender,
            age_years,
            admission_type,
            from_healthcare_facility: hcf,
            cerebrovascular_history: cer,
            diabetes: dia,
            hospitalized_past_90d: hosp,
            mrsa_positive_past_90d: mrsa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthEntry {
    pub subprogram: SubProgramId,
    /// Unconstrained parameter vector in the family layout.
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_records: usize,
    pub seed: u64,
    #[serde(default)]
    pub population: Population,
    pub truth: Vec<TruthEntry>,
    #[serde(default = "default_max_events")]
    pub max_events: usize,
}

fn default_max_events() -> usize {
    SimLimits::default().max_events
}

fn entries(r: RiggedRegistry) -> Vec<TruthEntry> {
    SubProgramId::ALL
        .iter()
        .zip(r.thetas())
        .map(|(&id, t)| TruthEntry {
            subprogram: id,
            theta: t.clone(),
        })
        .collect()
}

/// Parameters giving roughly 15% positive tests, about three tests per
/// stay, antibiotic-day mass piling up at the 30-day cap and negative-test
/// delays clustered at one day and one week.
pub fn default_truth() -> RiggedRegistry {
    use SubProgramId::*;
    RiggedRegistry::zeros()
        .intercept(Beta1Ab, 1.3)
        .weight(Beta1Ab, "alpha.age_div_100", 0.6)
        .weight(Beta1Ab, "alpha.from_healthcare_facility", 0.4)
        .weight(Beta1Ab, "alpha.hospitalized_past_90d", 0.3)
        .param(Beta1Ab, "log_alpha", 1.2f64.ln())
        .intercept(Beta1Icu, -1.0)
        .weight(Beta1Icu, "beta.ab_days_30", 1.5)
        .weight(Beta1Icu, "alpha.admission.emergency", 0.3)
        .param(Beta1Icu, "log_alpha", 1.5f64.ln())
        .intercept(Beta1Dia, -3.0)
        .weight(Beta1Dia, "alpha.diabetes", 0.8)
        .weight(Beta1Dia, "beta.icu_days_7", 1.5)
        .intercept(T1, 3.2)
        .weight(T1, "alpha.from_healthcare_facility", -0.3)
        .intercept(R1, -3.2)
        .weight(R1, "alpha.mrsa_positive_past_90d", 2.5)
        .weight(R1, "alpha.from_healthcare_facility", 0.8)
        .weight(R1, "alpha.hospitalized_past_90d", 0.4)
        .weight(R1, "beta.ab_days_30", 0.5)
        .intercept(Cont, 0.3)
        .weight(Cont, "alpha.age_div_100", 0.5)
        .weight(Cont, "result", 0.4)
        .weight(Cont, "beta.icu_days_7", 0.5)
        .param(DelayNeg, "cz1", 0.6)
        .param(DelayNeg, "cz2", 0.0)
        .param(DelayNeg, "cz3", -0.4)
        .slice_weight(DelayNeg, "wz2", "alpha.age_div_100", 0.5)
        .param(DelayNeg, "c_mu3", 3f64.ln())
        .param(DelayNeg, "log_sigma1", 0.25f64.ln())
        .param(DelayNeg, "log_sigma2", 0.2f64.ln())
        .param(DelayNeg, "log_sigma3", 0.5f64.ln())
        .intercept(DelayPos, 2f64.ln())
        .weight(DelayPos, "alpha.age_div_100", 0.3)
        .param(DelayPos, "log_sigma", 0.6f64.ln())
        .intercept(BetaIAb, 0.3)
        .weight(BetaIAb, "beta_prev.ab_days_30", 2.5)
        .weight(BetaIAb, "ln1p_delay_prev", 0.3)
        .param(BetaIAb, "log_alpha", 0.6f64.ln())
        .intercept(BetaIIcu, -1.5)
        .weight(BetaIIcu, "beta_prev.icu_days_7", 2.5)
        .param(BetaIIcu, "log_alpha", 0.8f64.ln())
        .intercept(BetaIDia, -4.0)
        .weight(BetaIDia, "beta_prev.dialysis_7d", 6.0)
        .intercept(TI, 2.5)
        .intercept(RI, -3.5)
        .weight(RI, "result_prev", 3.0)
        .weight(RI, "alpha.mrsa_positive_past_90d", 1.5)
        .weight(RI, "ln1p_delay_prev", -0.2)
        .weight(RI, "alpha.from_healthcare_facility", 0.5)
}

/// Moderate effects on well-populated features, for parameter recovery.
pub fn recovery_truth() -> RiggedRegistry {
    use SubProgramId::*;
    RiggedRegistry::zeros()
        .intercept(Beta1Ab, 2.3)
        .weight(Beta1Ab, "alpha.age_div_100", 0.5)
        .weight(Beta1Ab, "alpha.from_healthcare_facility", 0.4)
        .param(Beta1Ab, "log_alpha", 0.8f64.ln())
        .intercept(Beta1Icu, 0.8)
        .weight(Beta1Icu, "beta.ab_days_30", 1.0)
        .weight(Beta1Icu, "alpha.diabetes", 0.3)
        .param(Beta1Icu, "log_alpha", 1.0f64.ln())
        .intercept(Beta1Dia, -1.0)
        .weight(Beta1Dia, "alpha.diabetes", 0.7)
        .weight(Beta1Dia, "beta.icu_days_7", 0.8)
        .intercept(T1, 2.0)
        .weight(T1, "alpha.from_healthcare_facility", -0.5)
        .intercept(R1, -0.6)
        .weight(R1, "alpha.mrsa_positive_past_90d", 0.8)
        .weight(R1, "alpha.from_healthcare_facility", 0.5)
        .weight(R1, "beta.ab_days_30", 0.5)
        .intercept(Cont, 1.0)
        .weight(Cont, "alpha.age_div_100", 0.4)
        .weight(Cont, "result", -0.5)
        .weight(Cont, "alpha.diabetes", 0.3)
        .param(DelayNeg, "cz1", 0.5)
        .param(DelayNeg, "cz2", 0.0)
        .param(DelayNeg, "cz3", -0.3)
        .slice_weight(DelayNeg, "wz2", "alpha.diabetes", 0.5)
        .param(DelayNeg, "c_mu3", 3f64.ln())
        .slice_weight(DelayNeg, "w_mu3", "alpha.age_div_100", 0.2)
        .param(DelayNeg, "log_sigma1", 0.2f64.ln())
        .param(DelayNeg, "log_sigma2", 0.2f64.ln())
        .param(DelayNeg, "log_sigma3", 0.2f64.ln())
        .intercept(DelayPos, 2f64.ln())
        .weight(DelayPos, "alpha.age_div_100", 0.3)
        .weight(DelayPos, "alpha.diabetes", -0.2)
        .param(DelayPos, "log_sigma", 0.5f64.ln())
        .intercept(BetaIAb, 1.5)
        .weight(BetaIAb, "beta_prev.ab_days_30", 1.5)
        .weight(BetaIAb, "ln1p_delay_prev", 0.2)
        .param(BetaIAb, "log_alpha", 0.7f64.ln())
        .intercept(BetaIIcu, 0.6)
        .weight(BetaIIcu, "beta_prev.icu_days_7", 1.5)
        .param(BetaIIcu, "log_alpha", 0.8f64.ln())
        .intercept(BetaIDia, -1.5)
        .weight(BetaIDia, "beta_prev.dialysis_7d", 2.0)
        .intercept(TI, 1.5)
        .weight(TI, "result_prev", -0.5)
        .intercept(RI, -0.8)
        .weight(RI, "result_prev", 1.5)
        .weight(RI, "alpha.mrsa_positive_past_90d", 0.8)
        .weight(RI, "ln1p_delay_prev", -0.3)
}

impl SyntheticSpec {
    pub fn default_spec(n_records: usize, seed: u64) -> Self {
        Self {
            n_records,
            seed,
            population: Population::default(),
            truth: entries(default_truth()),
            max_events: default_max_events(),
        }
    }

    /// Balanced covariates and moderate effects.
    pub fn recovery(n_records: usize, seed: u64) -> Self {
        Self {
            n_records,
            seed,
            population: Population::balanced(),
            truth: entries(recovery_truth()),
            max_events: default_max_events(),
        }
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        self.population.validate()?;
        if self.max_events == 0 {
            return Err(SyntheticError::Invalid("max_events must be positive".into()));
        }
        for &id in &SubProgramId::ALL {
            let n = self.truth.iter().filter(|e| e.subprogram == id).count();
            if n != 1 {
                return Err(SyntheticError::Invalid(format!("{id} appears {n} times in truth")));
            }
        }
        Ok(())
    }

    pub fn theta(&self, id: SubProgramId) -> &[f64] {
        &self
            .truth
            .iter()
            .find(|e| e.subprogram == id)
            .expect("validated truth")
            .theta
    }

    /// Point-mass registry at the true parameters.
    pub fn registry(&self) -> Result<Registry, SyntheticError> {
        self.validate()?;
        let programs = SubProgramId::ALL
            .iter()
            .map(|&id| FittedSubProgram::point_mass(SubProgramSpec::for_id(id), self.theta(id).to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Registry::new(programs)?)
    }

    /// Point-mass registry at the canonical true parameters.
    pub fn canonical_registry(&self) -> Result<Registry, SyntheticError> {
        self.validate()?;
        let programs = SubProgramId::ALL
            .iter()
            .map(|&id| FittedSubProgram::point_mass(SubProgramSpec::for_id(id), canonicalize(id, self.theta(id))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Registry::new(programs)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub name: SubProgramId,
    pub family: Family,
    pub conditioning: Vec<String>,
    pub param_layout: ParamLayout,
    pub theta: Vec<f64>,
    /// `theta` with unidentifiable directions projected out.
    pub canonical_theta: Vec<f64>,
    /// `exp` of every log-scale slice, keyed by the slice name without `log_`.
    pub constrained: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub format: String,
    pub version: u32,
    pub n_records: usize,
    pub seed: u64,
    pub population: Population,
    pub subprograms: Vec<TruthRecord>,
}

impl TruthManifest {
    pub fn from_spec(spec: &SyntheticSpec) -> Self {
        let subprograms = SubProgramId::ALL
            .iter()
            .map(|&id| {
                let s = SubProgramSpec::for_id(id);
                let layout = s.layout();
                let theta = spec.theta(id).to_vec();
                let constrained = layout
                    .slices
                    .iter()
                    .filter(|sl| sl.kind == SliceKind::LogScale)
                    .map(|sl| (sl.name.trim_start_matches("log_").to_string(), theta[sl.start].exp()))
                    .collect();
                TruthRecord {
                    name: id,
                    family: s.family,
                    conditioning: id.layout().iter().map(|f| f.to_string()).collect(),
                    canonical_theta: canonicalize(id, &theta),
                    param_layout: layout,
                    theta,
                    constrained,
                }
            })
            .collect();
        Self {
            format: TRUTH_FORMAT.into(),
            version: TRUTH_VERSION,
            n_records: spec.n_records,
            seed: spec.seed,
            population: spec.population.clone(),
            subprograms,
        }
    }

    /// Rebuild the generating spec.
    pub fn to_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_records: self.n_records,
            seed: self.seed,
            population: self.population.clone(),
            truth: self
                .subprograms
                .iter()
                .map(|r| TruthEntry {
                    subprogram: r.name,
                    theta: r.theta.clone(),
                })
                .collect(),
            max_events: default_max_events(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<HospitalizationRecord>,
    pub manifest: TruthManifest,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, SyntheticError> {
    let registry = spec.registry()?;
    let bundle = registry.mean_bundle();
    let limits = SimLimits {
        max_events: spec.max_events,
    };
    let root = SimRng::new(spec.seed);
    let records = (0..spec.n_records)
        .into_par_iter()
        .map_init(
            || Simulator::new(&registry, ParamMode::Fixed(&bundle), limits),
            |sim, j| {
                let mut rng = root.split(j as u64);
                let alpha = spec.population.sample(&mut rng);
                let seq = sim
                    .full(&mut rng, &alpha)
                    .map_err(|source| SyntheticError::Sim { record: j, source })?;
                Ok(HospitalizationRecord::from_sequence(format!("syn{j:07}"), seq))
            },
        )
        .collect::<Result<Vec<_>, SyntheticError>>()?;
    Ok(SyntheticCorpus {
        records,
        manifest: TruthManifest::from_spec(spec),
    })
}

const ADMISSION_COLUMNS: std::ops::Range<usize> = 2..6;

/// Directions in parameter space along which the likelihood is constant:
/// the admission one-hot block against each intercept, and for the mixture
/// a common shift of the three component logits.
pub fn null_directions(id: SubProgramId) -> Vec<Vec<f64>> {
    let spec = SubProgramSpec::for_id(id);
    let k = spec.input_dim;
    let d = spec.layout().total_dim;
    let map = LocalMap::new(spec.family, k);
    let mut out = Vec::new();
    for term in &map.linear {
        let mut v = vec![0.0; d];
        for j in ADMISSION_COLUMNS {
            v[term.w_start + j] = 1.0;
        }
        v[term.c_index] = -1.0;
        out.push(v);
    }
    if spec.family == Family::LogNormalMixture3Glm {
        let logits = &map.linear[..3];
        for j in 0..k {
            let mut v = vec![0.0; d];
            for t in logits {
                v[t.w_start + j] = 1.0;
            }
            out.push(v);
        }
        let mut v = vec![0.0; d];
        for t in logits {
            v[t.c_index] = 1.0;
        }
        out.push(v);
    }
    out
}

/// Project `theta` onto the orthogonal complement of the null directions,
/// the minimum-norm member of its likelihood-equivalence class.
pub fn canonicalize(id: SubProgramId, theta: &[f64]) -> Vec<f64> {
    let dirs = null_directions(id);
    let d = theta.len();
    let n = DMatrix::from_fn(d, dirs.len(), |i, j| dirs[j][i]);
    let svd = n.svd(true, false);
    let u = svd.u.expect("requested U");
    let t = DVector::from_column_slice(theta);
    let mut proj = t.clone();
    for (c, &s) in svd.singular_values.iter().enumerate() {
        if s > 1e-9 {
            let col = u.column(c);
            proj -= col * col.dot(&t);
        }
    }
    proj.iter().copied().collect()
}
