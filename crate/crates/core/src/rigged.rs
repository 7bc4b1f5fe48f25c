//! Point-mass registries with hand-set parameters, for tests, examples and
//! closed-form checks.
//!
//! Defaults: β counts are 0 and dialysis is off, every test is a negative
//! NARE, `D_cont` always stops, and delays are log-normal with medians of 1
//! day (after a negative) and 3 days (after a positive), log-scale std 0.5.

use crate::patient_model::SubProgramId;
use crate::subprograms::{FittedSubProgram, Registry, SubProgramSpec};

/// A logit large enough that `logistic` saturates to exactly 0 or 1.
pub const SURE_LOGIT: f64 = 800.0;

pub fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        -SURE_LOGIT
    } else if p >= 1.0 {
        SURE_LOGIT
    } else {
        (p / (1.0 - p)).ln()
    }
}

#[derive(Debug, Clone)]
pub struct RiggedRegistry {
    thetas: Vec<Vec<f64>>,
}

impl Default for RiggedRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl RiggedRegistry {
    pub fn new() -> Self {
        Self::zeros()
            .beta_at_bounds(false)
            .bernoulli(SubProgramId::Beta1Dia, 0.0)
            .bernoulli(SubProgramId::BetaIDia, 0.0)
            .nare_prob(1.0)
            .result_prob(0.0)
            .cont_prob(0.0)
            .delay_lognormal(1.0, 3.0, 0.5)
    }

    /// Every parameter at zero.
    pub fn zeros() -> Self {
        let thetas = SubProgramId::ALL
            .iter()
            .map(|&id| vec![0.0; SubProgramSpec::for_id(id).layout().total_dim])
            .collect();
        Self { thetas }
    }

    pub fn from_thetas(thetas: Vec<Vec<f64>>) -> Self {
        assert_eq!(thetas.len(), SubProgramId::ALL.len());
        Self { thetas }
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }

    /// Raw unconstrained parameters of one sub-program.
    pub fn theta_mut(&mut self, id: SubProgramId) -> &mut Vec<f64> {
        &mut self.thetas[id.index()]
    }

    fn intercept_index(id: SubProgramId) -> usize {
        id.input_dim()
    }

    /// A Bernoulli sub-program with constant probability `p`.
    pub fn bernoulli(mut self, id: SubProgramId, p: f64) -> Self {
        let t = self.theta_mut(id);
        t.iter_mut().for_each(|v| *v = 0.0);
        t[Self::intercept_index(id)] = logit(p);
        self
    }

    /// Set the intercept (on the link scale) of a single-predictor family.
    pub fn intercept(mut self, id: SubProgramId, c: f64) -> Self {
        self.theta_mut(id)[Self::intercept_index(id)] = c;
        self
    }

    /// Set the weight on one named conditioning field of a single-predictor
    /// family. Panics on an unknown field.
    pub fn weight(mut self, id: SubProgramId, field: &str, w: f64) -> Self {
        let i = id
            .layout()
            .iter()
            .position(|f| *f == field)
            .unwrap_or_else(|| panic!("{id} has no field {field}"));
        self.theta_mut(id)[i] = w;
        self
    }

    /// Set a one-element parameter slice such as `log_alpha` or `cz1`.
    pub fn param(mut self, id: SubProgramId, slice: &str, v: f64) -> Self {
        let layout = SubProgramSpec::for_id(id).layout();
        let s = layout.slice(slice).unwrap_or_else(|| panic!("{id} has no slice {slice}"));
        assert_eq!(s.len, 1, "{id}.{slice} is not a scalar");
        self.theta_mut(id)[s.start] = v;
        self
    }

    /// Set one field's weight inside a named weight slice such as `wz2`.
    pub fn slice_weight(mut self, id: SubProgramId, slice: &str, field: &str, w: f64) -> Self {
        let layout = SubProgramSpec::for_id(id).layout();
        let s = layout.slice(slice).unwrap_or_else(|| panic!("{id} has no slice {slice}"));
        let i = id
            .layout()
            .iter()
            .position(|f| *f == field)
            .unwrap_or_else(|| panic!("{id} has no field {field}"));
        self.theta_mut(id)[s.start + i] = w;
        self
    }

    pub fn nare_prob(self, p: f64) -> Self {
        self.bernoulli(SubProgramId::T1, p).bernoulli(SubProgramId::TI, p)
    }

    pub fn result_prob(self, p: f64) -> Self {
        self.bernoulli(SubProgramId::R1, p).bernoulli(SubProgramId::RI, p)
    }

    pub fn cont_prob(self, p: f64) -> Self {
        self.bernoulli(SubProgramId::Cont, p)
    }

    /// All β counts pinned at 0 (`false`) or at their censor bounds (`true`),
    /// with dialysis following the same flag.
    pub fn beta_at_bounds(mut self, high: bool) -> Self {
        let c = if high { SURE_LOGIT / 10.0 } else { -SURE_LOGIT };
        for id in [
            SubProgramId::Beta1Ab,
            SubProgramId::Beta1Icu,
            SubProgramId::BetaIAb,
            SubProgramId::BetaIIcu,
        ] {
            let k = id.input_dim();
            let t = self.theta_mut(id);
            t.iter_mut().for_each(|v| *v = 0.0);
            t[k] = c;
            // tiny overdispersion: the count is ~Poisson(e^c)
            t[k + 1] = -20.0;
        }
        let p = if high { 1.0 } else { 0.0 };
        self.bernoulli(SubProgramId::Beta1Dia, p).bernoulli(SubProgramId::BetaIDia, p)
    }

    /// Log-normal delays with the given medians (days) and log-scale std.
    /// The negative-branch mixture puts all weight on its free component.
    pub fn delay_lognormal(mut self, neg_median: f64, pos_median: f64, sigma: f64) -> Self {
        let k = SubProgramId::DelayNeg.input_dim();
        let t = self.theta_mut(SubProgramId::DelayNeg);
        t.iter_mut().for_each(|v| *v = 0.0);
        t[3 * k] = -SURE_LOGIT;
        t[3 * k + 1] = -SURE_LOGIT;
        t[4 * k + 3] = neg_median.ln();
        for i in 0..3 {
            t[4 * k + 4 + i] = sigma.ln();
        }
        let k = SubProgramId::DelayPos.input_dim();
        let t = self.theta_mut(SubProgramId::DelayPos);
        t.iter_mut().for_each(|v| *v = 0.0);
        t[k] = pos_median.ln();
        t[k + 1] = sigma.ln();
        self
    }

    /// Nearly deterministic delays.
    pub fn delay_days(self, neg: f64, pos: f64) -> Self {
        self.delay_lognormal(neg, pos, 0.05)
    }

    /// Negative-branch delays from the one-day and one-week components,
    /// with weight `w1` on the first.
    pub fn delay_neg_fixed_components(mut self, w1: f64, sigma: f64) -> Self {
        let k = SubProgramId::DelayNeg.input_dim();
        let t = self.theta_mut(SubProgramId::DelayNeg);
        t[3 * k] = (w1 / (1.0 - w1)).ln();
        t[3 * k + 1] = 0.0;
        t[3 * k + 2] = -SURE_LOGIT;
        t[4 * k + 4] = sigma.ln();
        t[4 * k + 5] = sigma.ln();
        self
    }

    pub fn build(&self) -> Registry {
        let programs = SubProgramId::ALL
            .iter()
            .map(|&id| {
                FittedSubProgram::point_mass(SubProgramSpec::for_id(id), self.thetas[id.index()].clone())
                    .expect("rigged parameters are finite and sized")
            })
            .collect();
        Registry::new(programs).expect("rigged registry is complete")
    }
}
