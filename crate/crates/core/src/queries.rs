//! Monte Carlo estimators for the four case-study questions.
//!
//! A query with `n` sequences and `B` posterior draws runs `B` bundles. Bundle
//! `b` fixes one parameter vector per sub-program and simulates its share of
//! the `n` sequences, each on its own stream `split(seed, b, j)`. The
//! estimate pools all runs; the posterior band is the 5th–95th percentile of
//! the per-bundle means. Only integer counts are reduced across workers, so
//! results do not depend on the worker count.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patient_model::{AdmissionFeatures, TestTimeFeatures};
use crate::rng::SimRng;
use crate::simulators::{ParamMode, SimError, SimLimits, SimulatedSequence, Simulator, TestType};
use crate::subprograms::Registry;

pub const DEFAULT_N_SEQUENCES: usize = 10_000;
pub const DEFAULT_POSTERIOR_DRAWS: usize = 50;
pub const MAX_SWEEP_POINTS: usize = 200;
pub const MIN_ACCEPTED: u64 = 100;
const BAND_LO: f64 = 0.05;
const BAND_HI: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    /// A field value is invalid on its own.
    #[error("invalid field {field}: {reason}")]
    Field { field: String, reason: String },
    /// A field is missing or not allowed for the requested kind.
    #[error("{kind}: field {field} {reason}")]
    KindMismatch {
        kind: &'static str,
        field: String,
        reason: String,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("insufficient acceptance: {accepted} of {requested} sequences accepted (rate {rate})")]
    InsufficientAcceptance { accepted: u64, requested: u64, rate: f64 },
    #[error("worker pool: {0}")]
    Pool(String),
}

fn field_err(field: &str, reason: impl Into<String>) -> QueryError {
    QueryError::Field {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    AdmissionRisk,
    ExtendedStayRisk,
    RetestNow,
    Deisolation,
}

impl QueryKind {
    pub const ALL: [QueryKind; 4] = [
        QueryKind::AdmissionRisk,
        QueryKind::ExtendedStayRisk,
        QueryKind::RetestNow,
        QueryKind::Deisolation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryKind::AdmissionRisk => "admission_risk",
            QueryKind::ExtendedStayRisk => "extended_stay_risk",
            QueryKind::RetestNow => "retest_now",
            QueryKind::Deisolation => "deisolation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl std::fmt::Display for QueryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which indicator the de-isolation query evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeisolationPredicate {
    /// The next test is a negative NARE and nothing afterwards is positive.
    #[default]
    NextNareNegative,
    /// No generated test is positive.
    AllNegative,
}

mod opt_bit {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_u8(u8::from(*b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "crate::bit")] bool);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub kind: QueryKind,
    pub alpha: AdmissionFeatures,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<TestTimeFeatures>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_bit")]
    pub r1: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_m: Option<f64>,
    #[serde(default = "default_n_sequences")]
    pub n_sequences: usize,
    #[serde(default = "default_posterior_draws")]
    pub n_posterior_draws: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub predicate: DeisolationPredicate,
}

fn default_n_sequences() -> usize {
    DEFAULT_N_SEQUENCES
}

fn default_posterior_draws() -> usize {
    DEFAULT_POSTERIOR_DRAWS
}

impl QuerySpec {
    pub fn admission_risk(alpha: AdmissionFeatures) -> Self {
        Self {
            kind: QueryKind::AdmissionRisk,
            alpha,
            beta1: None,
            r1: None,
            tau_p: None,
            tau_m: None,
            n_sequences: DEFAULT_N_SEQUENCES,
            n_posterior_draws: DEFAULT_POSTERIOR_DRAWS,
            seed: 0,
            predicate: DeisolationPredicate::default(),
        }
    }

    pub fn extended_stay(alpha: AdmissionFeatures, beta1: TestTimeFeatures, r1: bool, tau_p: f64, tau_m: f64) -> Self {
        Self {
            kind: QueryKind::ExtendedStayRisk,
            beta1: Some(beta1),
            r1: Some(r1),
            tau_p: Some(tau_p),
            tau_m: Some(tau_m),
            ..Self::admission_risk(alpha)
        }
    }

    pub fn retest_now(alpha: AdmissionFeatures, beta1: TestTimeFeatures, r1: bool, tau_p: f64) -> Self {
        Self {
            kind: QueryKind::RetestNow,
            beta1: Some(beta1),
            r1: Some(r1),
            tau_p: Some(tau_p),
            ..Self::admission_risk(alpha)
        }
    }

    pub fn deisolation(alpha: AdmissionFeatures, beta1: TestTimeFeatures, tau_p: f64) -> Self {
        Self {
            kind: QueryKind::Deisolation,
            beta1: Some(beta1),
            r1: Some(false),
            tau_p: Some(tau_p),
            ..Self::admission_risk(alpha)
        }
    }

    pub fn with_runs(mut self, n_sequences: usize, n_posterior_draws: usize, seed: u64) -> Self {
        self.n_sequences = n_sequences;
        self.n_posterior_draws = n_posterior_draws;
        self.seed = seed;
        self
    }

    /// Check field values, then the fields the kind requires or forbids.
    pub fn validate(&self) -> Result<(), QueryError> {
        if let Err(e) = self.alpha.validate() {
            return Err(field_err("alpha.age_years", e.to_string()));
        }
        if let Some(b) = &self.beta1 {
            if let Err(e) = b.validate() {
                let field = match &e {
                    crate::patient_model::FeatureError::Invalid { field, .. } => format!("beta1.{field}"),
                    _ => "beta1".to_string(),
                };
                return Err(field_err(&field, e.to_string()));
            }
        }
        if let Some(t) = self.tau_p {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(field_err("tau_p", format!("{t} must be a finite number >= 0")));
            }
        }
        if let Some(t) = self.tau_m {
            if !(t > 0.0) || !t.is_finite() {
                return Err(field_err("tau_m", format!("{t} must be a finite number > 0")));
            }
        }
        if self.n_sequences == 0 {
            return Err(field_err("n_sequences", "must be positive"));
        }
        if self.n_posterior_draws == 0 {
            return Err(field_err("n_posterior_draws", "must be positive"));
        }
        if self.n_posterior_draws > self.n_sequences {
            return Err(field_err("n_posterior_draws", "cannot exceed n_sequences"));
        }
        let kind = self.kind.as_str();
        let mismatch = |field: &str, reason: &str| QueryError::KindMismatch {
            kind,
            field: field.to_string(),
            reason: reason.to_string(),
        };
        let need = |present: bool, field: &str| if present { Ok(()) } else { Err(mismatch(field, "is required")) };
        let forbid = |present: bool, field: &str| if present { Err(mismatch(field, "is not used by this kind")) } else { Ok(()) };
        match self.kind {
            QueryKind::AdmissionRisk => {
                forbid(self.beta1.is_some(), "beta1")?;
                forbid(self.r1.is_some(), "r1")?;
                forbid(self.tau_p.is_some(), "tau_p")?;
                forbid(self.tau_m.is_some(), "tau_m")?;
            }
            QueryKind::ExtendedStayRisk => {
                need(self.beta1.is_some(), "beta1")?;
                need(self.r1.is_some(), "r1")?;
                need(self.tau_p.is_some(), "tau_p")?;
                need(self.tau_m.is_some(), "tau_m")?;
            }
            QueryKind::RetestNow | QueryKind::Deisolation => {
                need(self.beta1.is_some(), "beta1")?;
                need(self.r1.is_some(), "r1")?;
                need(self.tau_p.is_some(), "tau_p")?;
                forbid(self.tau_m.is_some(), "tau_m")?;
            }
        }
        if self.kind != QueryKind::Deisolation && self.predicate != DeisolationPredicate::default() {
            return Err(mismatch("predicate", "only applies to deisolation"));
        }
        if self.kind == QueryKind::Deisolation {
            if self.r1 != Some(false) {
                return Err(mismatch("r1", "must be 0: de-isolation follows a negative test"));
            }
            if !self.alpha.mrsa_positive_past_90d {
                return Err(mismatch(
                    "alpha.mrsa_positive_past_90d",
                    "must be 1: de-isolation applies to previously positive patients",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub estimate: f64,
    pub mc_stderr: f64,
    pub posterior_band: Band,
    pub n_effective: u64,
}

impl QueryResult {
    /// Pool per-bundle `(hits, runs)` counts.
    pub fn from_bundles(counts: &[(u64, u64)]) -> Self {
        let hits: u64 = counts.iter().map(|c| c.0).sum();
        let n: u64 = counts.iter().map(|c| c.1).sum();
        let p = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
        let stderr = if n == 0 { 0.0 } else { (p * (1.0 - p) / n as f64).sqrt() };
        let mut means: Vec<f64> = counts
            .iter()
            .filter(|c| c.1 > 0)
            .map(|c| c.0 as f64 / c.1 as f64)
            .collect();
        means.sort_by(f64::total_cmp);
        let band = if means.is_empty() {
            Band { lo: p, hi: p }
        } else {
            Band {
                lo: quantile_sorted(&means, BAND_LO),
                hi: quantile_sorted(&means, BAND_HI),
            }
        };
        Self {
            estimate: p,
            mc_stderr: stderr,
            posterior_band: band,
            n_effective: n,
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
}

/// Which input a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TauM,
    TauP,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub result: QueryResult,
}

pub fn validate_sweep(spec: &QuerySpec, axis: SweepAxis, grid: &[f64]) -> Result<(), QueryError> {
    if grid.is_empty() {
        return Err(field_err("grid", "must contain at least one point"));
    }
    if grid.len() > MAX_SWEEP_POINTS {
        return Err(field_err("grid", format!("{} points exceeds the limit of {MAX_SWEEP_POINTS}", grid.len())));
    }
    let ok = match axis {
        SweepAxis::TauM => spec.kind == QueryKind::ExtendedStayRisk,
        SweepAxis::TauP => spec.kind != QueryKind::AdmissionRisk,
    };
    if !ok {
        return Err(QueryError::KindMismatch {
            kind: spec.kind.as_str(),
            field: "axis".into(),
            reason: format!("cannot sweep {axis:?}"),
        });
    }
    for (i, &v) in grid.iter().enumerate() {
        let valid = v.is_finite() && if axis == SweepAxis::TauM { v > 0.0 } else { v >= 0.0 };
        if !valid {
            return Err(field_err(&format!("grid[{i}]"), format!("{v} is not a valid value")));
        }
    }
    Ok(())
}

/// Runs queries against one registry on a fixed-size worker pool.
#[derive(Clone)]
pub struct QueryEngine<'a> {
    registry: &'a Registry,
    workers: usize,
    pool: Arc<rayon::ThreadPool>,
    limits: SimLimits,
}

impl<'a> QueryEngine<'a> {
    pub fn new(registry: &'a Registry, workers: usize) -> Result<Self, QueryError> {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| QueryError::Pool(e.to_string()))?;
        Ok(Self {
            registry,
            workers,
            pool: Arc::new(pool),
            limits: SimLimits::default(),
        })
    }

    /// Share an existing pool, e.g. across service requests.
    pub fn with_pool(registry: &'a Registry, pool: Arc<rayon::ThreadPool>) -> Self {
        Self {
            registry,
            workers: pool.current_num_threads(),
            pool,
            limits: SimLimits::default(),
        }
    }

    pub fn with_limits(mut self, limits: SimLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Run `per_run` once per sequence, grouped into `bundles` posterior
    /// draws. `per_run` returns `None` to reject a run.
    fn bundled<F>(&self, n: usize, bundles: usize, seed: u64, per_run: F) -> Result<Vec<(u64, u64)>, QueryError>
    where
        F: Fn(&mut Simulator<'_>, &mut SimRng) -> Result<Option<bool>, SimError> + Sync,
    {
        let root = SimRng::new(seed);
        let registry = self.registry;
        let limits = self.limits;
        self.pool.install(|| {
            (0..bundles)
                .into_par_iter()
                .map(|b| {
                    let runs = n / bundles + usize::from(b < n % bundles);
                    let stream = root.split(b as u64);
                    let theta = registry.draw_bundle(&mut stream.split(u64::MAX));
                    let mut sim = Simulator::new(registry, ParamMode::Fixed(&theta), limits);
                    let mut hits = 0u64;
                    let mut kept = 0u64;
                    for j in 0..runs {
                        let mut rng = stream.split(j as u64);
                        if let Some(hit) = per_run(&mut sim, &mut rng)? {
                            kept += 1;
                            hits += u64::from(hit);
                        }
                    }
                    Ok((hits, kept))
                })
                .collect::<Result<Vec<_>, SimError>>()
                .map_err(QueryError::from)
        })
    }

    fn indicator<F>(&self, spec: &QuerySpec, f: F) -> Result<QueryResult, QueryError>
    where
        F: Fn(&mut Simulator<'_>, &mut SimRng) -> Result<bool, SimError> + Sync,
    {
        let counts = self.bundled(spec.n_sequences, spec.n_posterior_draws, spec.seed, |s, r| f(s, r).map(Some))?;
        Ok(QueryResult::from_bundles(&counts))
    }

    fn expect_kind(spec: &QuerySpec, kind: QueryKind) -> Result<(), QueryError> {
        spec.validate()?;
        if spec.kind != kind {
            return Err(QueryError::KindMismatch {
                kind: kind.as_str(),
                field: "kind".into(),
                reason: format!("got {}", spec.kind),
            });
        }
        Ok(())
    }

    /// Probability that any test during the stay is positive.
    pub fn estimate_admission_risk(&self, spec: &QuerySpec) -> Result<QueryResult, QueryError> {
        Self::expect_kind(spec, QueryKind::AdmissionRisk)?;
        self.indicator(spec, |sim, rng| Ok(sim.full(rng, &spec.alpha)?.any_positive()))
    }

    /// Probability of a positive test within `tau_m` more days.
    pub fn estimate_extended_stay_risk(&self, spec: &QuerySpec) -> Result<QueryResult, QueryError> {
        Self::expect_kind(spec, QueryKind::ExtendedStayRisk)?;
        let (b, r, tp, tm) = (spec.beta1.unwrap(), spec.r1.unwrap(), spec.tau_p.unwrap(), spec.tau_m.unwrap());
        self.indicator(spec, |sim, rng| Ok(sim.partial_a(rng, &spec.alpha, b, r, tp, tm)?.any_positive()))
    }

    /// Probability that a NARE taken `tau_p` days after the last test is positive.
    pub fn estimate_retest_now(&self, spec: &QuerySpec) -> Result<QueryResult, QueryError> {
        Self::expect_kind(spec, QueryKind::RetestNow)?;
        let (b, r, tp) = (spec.beta1.unwrap(), spec.r1.unwrap(), spec.tau_p.unwrap());
        self.indicator(spec, |sim, rng| Ok(sim.partial_b(rng, &spec.alpha, b, r, tp)?.result))
    }

    /// Probability that a previously positive patient, negative `tau_p` days
    /// ago, can be de-isolated.
    pub fn estimate_deisolation(&self, spec: &QuerySpec) -> Result<QueryResult, QueryError> {
        Self::expect_kind(spec, QueryKind::Deisolation)?;
        let (b, tp) = (spec.beta1.unwrap(), spec.tau_p.unwrap());
        let predicate = spec.predicate;
        self.indicator(spec, |sim, rng| {
            let seq = sim.partial_c(rng, &spec.alpha, b, tp)?;
            Ok(deisolation_indicator(&seq, predicate))
        })
    }

    pub fn estimate(&self, spec: &QuerySpec) -> Result<QueryResult, QueryError> {
        match spec.kind {
            QueryKind::AdmissionRisk => self.estimate_admission_risk(spec),
            QueryKind::ExtendedStayRisk => self.estimate_extended_stay_risk(spec),
            QueryKind::RetestNow => self.estimate_retest_now(spec),
            QueryKind::Deisolation => self.estimate_deisolation(spec),
        }
    }

    /// Evaluate `spec` at every grid value of `axis`, sharing the seed across
    /// points.
    pub fn sweep(&self, spec: &QuerySpec, axis: SweepAxis, grid: &[f64]) -> Result<Vec<SweepPoint>, QueryError> {
        spec.validate()?;
        validate_sweep(spec, axis, grid)?;
        grid.iter()
            .map(|&value| {
                let mut s = spec.clone();
                match axis {
                    SweepAxis::TauM => s.tau_m = Some(value),
                    SweepAxis::TauP => s.tau_p = Some(value),
                }
                Ok(SweepPoint {
                    value,
                    result: self.estimate(&s)?,
                })
            })
            .collect()
    }

    /// Reference estimator: simulate whole stays, keep those satisfying
    /// `conditioner`, and average `predicate` over the survivors.
    pub fn rejection_query<C, P>(
        &self,
        alpha: &AdmissionFeatures,
        conditioner: C,
        predicate: P,
        n: usize,
        bundles: usize,
        seed: u64,
    ) -> Result<QueryResult, QueryError>
    where
        C: Fn(&SimulatedSequence) -> bool + Sync,
        P: Fn(&SimulatedSequence) -> bool + Sync,
    {
        if n == 0 || bundles == 0 || bundles > n {
            return Err(field_err("n", "need 0 < bundles <= n"));
        }
        let counts = self.bundled(n, bundles, seed, |sim, rng| {
            let seq = sim.full(rng, alpha)?;
            Ok(conditioner(&seq).then(|| predicate(&seq)))
        })?;
        let result = QueryResult::from_bundles(&counts);
        if result.n_effective < MIN_ACCEPTED {
            return Err(QueryError::InsufficientAcceptance {
                accepted: result.n_effective,
                requested: n as u64,
                rate: result.n_effective as f64 / n as f64,
            });
        }
        Ok(result)
    }
}

/// The de-isolation indicator over the generated part of a stay.
pub fn deisolation_indicator(seq: &SimulatedSequence, predicate: DeisolationPredicate) -> bool {
    let none_positive = !seq.any_positive();
    match predicate {
        DeisolationPredicate::AllNegative => none_positive,
        DeisolationPredicate::NextNareNegative => {
            let next_ok = seq
                .events
                .first()
                .is_some_and(|e| e.test_type == TestType::Nare && !e.result);
            next_ok && none_positive
        }
    }
}
