//! Bayesian GLM-like sub-programs: one family, a linear predictor over the
//! conditioning vector, and a Gaussian posterior over the unconstrained
//! parameter vector.
//!
//! Parameter layouts (`k` = input dim):
//!
//! | family              | slices                                                        |
//! |---------------------|---------------------------------------------------------------|
//! | Bernoulli           | `w[k] c`                                                      |
//! | censored NegBinom   | `w[k] c log_alpha`                                            |
//! | LogNormal           | `w[k] c log_sigma`                                            |
//! | LogNormal mixture-3 | `wz1[k] wz2[k] wz3[k] cz1 cz2 cz3 w_mu3[k] c_mu3 log_sigma1..3` |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{
    self, bernoulli_logit_logpmf, censored_nb_logpmf, censored_nb_logpmf_kernel, censored_nb_sample, logistic,
    lognormal_logpdf_kernel, lognormal_sample, lognormal_sample_truncated, mixture3_logpdf, mixture3_logpdf_kernel,
    mixture3_sample, mixture3_sample_truncated, negbinom_from_glm, CensorBound, DistError, GaussianChol,
    LogNormalParam, Mixture3Param, HALF_LN_2PI,
};
use crate::patient_model::SubProgramId;
use crate::rng::SimRng;
use crate::scalar::{log_sum_exp_f64, Scalar};

/// Default location of the one-day retest component, `ln 1`.
pub const MIXTURE_MU1: f64 = 0.0;
/// Default location of the one-week retest component, `ln 7`.
pub const MIXTURE_MU2: f64 = 1.945_910_149_055_313_3;
pub const DEFAULT_PREDICTIVE_DRAWS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubProgramError {
    #[error("{subprogram}: expected {expected} values, got {got}")]
    Dimension {
        subprogram: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{subprogram}: outcome {outcome} outside the family support")]
    Support { subprogram: &'static str, outcome: String },
    #[error("{subprogram}: non-finite parameter at index {index}")]
    NonFinite { subprogram: &'static str, index: usize },
    #[error("{subprogram}: {source}")]
    Dist {
        subprogram: &'static str,
        #[source]
        source: DistError,
    },
    #[error("invalid spec for {subprogram}: {reason}")]
    Spec { subprogram: &'static str, reason: String },
    #[error("registry is missing sub-program {0}")]
    Missing(&'static str),
    #[error("registry lists sub-program {0} twice")]
    Duplicate(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BernoulliGlm,
    CensoredNegBinomGlm,
    LogNormalGlm,
    LogNormalMixture3Glm,
}

/// Family constants that are not learned.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FixedConstants {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub censor_bound: Option<CensorBound>,
    /// Locations of the first two mixture components (log days).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture_mus: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubProgramSpec {
    pub name: SubProgramId,
    pub family: Family,
    pub input_dim: usize,
    #[serde(default)]
    pub fixed: FixedConstants,
}

impl SubProgramSpec {
    /// The registry's default spec for a sub-program.
    pub fn for_id(id: SubProgramId) -> Self {
        use SubProgramId::*;
        let (family, fixed) = match id {
            Beta1Ab | BetaIAb => (
                Family::CensoredNegBinomGlm,
                FixedConstants {
                    censor_bound: Some(CensorBound::ANTIBIOTIC_DAYS),
                    mixture_mus: None,
                },
            ),
            Beta1Icu | BetaIIcu => (
                Family::CensoredNegBinomGlm,
                FixedConstants {
                    censor_bound: Some(CensorBound::ICU_DAYS),
                    mixture_mus: None,
                },
            ),
            Beta1Dia | BetaIDia | T1 | R1 | Cont | TI | RI => (Family::BernoulliGlm, FixedConstants::default()),
            DelayNeg => (
                Family::LogNormalMixture3Glm,
                FixedConstants {
                    censor_bound: None,
                    mixture_mus: Some([MIXTURE_MU1, MIXTURE_MU2]),
                },
            ),
            DelayPos => (Family::LogNormalGlm, FixedConstants::default()),
        };
        Self {
            name: id,
            family,
            input_dim: id.input_dim(),
            fixed,
        }
    }

    /// A spec outside the registry, for tests and fixtures.
    pub fn custom(name: SubProgramId, family: Family, input_dim: usize, fixed: FixedConstants) -> Result<Self, SubProgramError> {
        let spec = Self {
            name,
            family,
            input_dim,
            fixed,
        };
        spec.validate_constants()?;
        Ok(spec)
    }

    fn err(&self, reason: impl Into<String>) -> SubProgramError {
        SubProgramError::Spec {
            subprogram: self.name.name(),
            reason: reason.into(),
        }
    }

    fn validate_constants(&self) -> Result<(), SubProgramError> {
        let needs_bound = self.family == Family::CensoredNegBinomGlm;
        let needs_mus = self.family == Family::LogNormalMixture3Glm;
        if needs_bound != self.fixed.censor_bound.is_some() {
            return Err(self.err("censor bound present iff the family is censored NegBinom"));
        }
        if needs_mus != self.fixed.mixture_mus.is_some() {
            return Err(self.err("fixed mixture means present iff the family is a mixture"));
        }
        if let Some(m) = self.fixed.mixture_mus {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(self.err("fixed mixture means must be finite"));
            }
        }
        Ok(())
    }

    /// Check against the registry layout as well as the family constants.
    pub fn validate(&self) -> Result<(), SubProgramError> {
        self.validate_constants()?;
        let registry = Self::for_id(self.name);
        if self.family != registry.family || self.fixed.censor_bound != registry.fixed.censor_bound {
            return Err(self.err(format!("expected family {:?} with the registry censor bound", registry.family)));
        }
        if self.input_dim != self.name.input_dim() {
            return Err(self.err(format!(
                "input_dim {} differs from the conditioning layout ({})",
                self.input_dim,
                self.name.input_dim()
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.family, self.input_dim)
    }

    fn censor_bound(&self) -> CensorBound {
        self.fixed.censor_bound.expect("validated censored spec")
    }

    fn mixture_mus(&self) -> [f64; 2] {
        self.fixed.mixture_mus.expect("validated mixture spec")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKind {
    Weights,
    Intercept,
    /// Log of a positive parameter; `exp` gives the constrained value.
    LogScale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedSlice {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub kind: SliceKind,
}

/// A linear predictor `w·x + c` inside the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearTerm {
    pub w_start: usize,
    pub c_index: usize,
}

/// Named, disjoint slices covering the unconstrained parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub total_dim: usize,
    pub slices: Vec<NamedSlice>,
}

impl ParamLayout {
    pub fn new(family: Family, k: usize) -> Self {
        let mut slices = Vec::new();
        let mut at = 0;
        let mut push = |name: &str, len: usize, kind: SliceKind| {
            slices.push(NamedSlice {
                name: name.to_string(),
                start: at,
                len,
                kind,
            });
            at += len;
        };
        match family {
            Family::BernoulliGlm => {
                push("w", k, SliceKind::Weights);
                push("c", 1, SliceKind::Intercept);
            }
            Family::CensoredNegBinomGlm => {
                push("w", k, SliceKind::Weights);
                push("c", 1, SliceKind::Intercept);
                push("log_alpha", 1, SliceKind::LogScale);
            }
            Family::LogNormalGlm => {
                push("w", k, SliceKind::Weights);
                push("c", 1, SliceKind::Intercept);
                push("log_sigma", 1, SliceKind::LogScale);
            }
            Family::LogNormalMixture3Glm => {
                for n in ["wz1", "wz2", "wz3"] {
                    push(n, k, SliceKind::Weights);
                }
                for n in ["cz1", "cz2", "cz3"] {
                    push(n, 1, SliceKind::Intercept);
                }
                push("w_mu3", k, SliceKind::Weights);
                push("c_mu3", 1, SliceKind::Intercept);
                for n in ["log_sigma1", "log_sigma2", "log_sigma3"] {
                    push(n, 1, SliceKind::LogScale);
                }
            }
        }
        Self { total_dim: at, slices }
    }

    pub fn slice(&self, name: &str) -> Option<&NamedSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn kind_at(&self, index: usize) -> Option<SliceKind> {
        self.slices
            .iter()
            .find(|s| (s.start..s.start + s.len).contains(&index))
            .map(|s| s.kind)
    }
}

/// How a family's per-datum log-likelihood reads the parameter vector:
/// a list of linear predictors followed by raw coordinates. These
/// "locals" are what the per-datum kernels consume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalMap {
    pub linear: Vec<LinearTerm>,
    pub direct: Vec<usize>,
}

impl LocalMap {
    pub fn new(family: Family, k: usize) -> Self {
        match family {
            Family::BernoulliGlm => Self {
                linear: vec![LinearTerm { w_start: 0, c_index: k }],
                direct: vec![],
            },
            Family::CensoredNegBinomGlm | Family::LogNormalGlm => Self {
                linear: vec![LinearTerm { w_start: 0, c_index: k }],
                direct: vec![k + 1],
            },
            Family::LogNormalMixture3Glm => Self {
                linear: vec![
                    LinearTerm { w_start: 0, c_index: 3 * k },
                    LinearTerm {
                        w_start: k,
                        c_index: 3 * k + 1,
                    },
                    LinearTerm {
                        w_start: 2 * k,
                        c_index: 3 * k + 2,
                    },
                    LinearTerm {
                        w_start: 3 * k + 3,
                        c_index: 4 * k + 3,
                    },
                ],
                direct: vec![4 * k + 4, 4 * k + 5, 4 * k + 6],
            },
        }
    }

    pub fn len(&self) -> usize {
        self.linear.len() + self.direct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fill `out` with the locals at `theta` for input `x`.
    pub fn eval(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        let k = x.len();
        for (o, term) in out.iter_mut().zip(&self.linear) {
            let w = &theta[term.w_start..term.w_start + k];
            *o = dot(w, x) + theta[term.c_index];
        }
        for (o, &i) in out[self.linear.len()..].iter_mut().zip(&self.direct) {
            *o = theta[i];
        }
    }

    /// Accumulate `scale · ∂/∂θ` given per-local gradients.
    pub fn chain(&self, local_grad: &[f64], x: &[f64], scale: f64, grad: &mut [f64]) {
        let k = x.len();
        for (g, term) in local_grad.iter().zip(&self.linear) {
            let s = scale * g;
            if s == 0.0 {
                continue;
            }
            for (gw, xi) in grad[term.w_start..term.w_start + k].iter_mut().zip(x) {
                *gw += s * xi;
            }
            grad[term.c_index] += s;
        }
        for (g, &i) in local_grad[self.linear.len()..].iter().zip(&self.direct) {
            grad[i] += scale * g;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A sub-program outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Bit(bool),
    Count(u32),
    Positive(f64),
}

impl Outcome {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Outcome::Bit(b) => f64::from(u8::from(b)),
            Outcome::Count(c) => c as f64,
            Outcome::Positive(v) => v,
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Bit(b) => write!(f, "bit {}", u8::from(*b)),
            Outcome::Count(c) => write!(f, "count {c}"),
            Outcome::Positive(v) => write!(f, "{v}"),
        }
    }
}

/// Family parameters after mapping log-scale slices through `exp`.
#[derive(Debug, Clone, PartialEq)]
pub enum Constrained {
    Bernoulli {
        w: Vec<f64>,
        c: f64,
    },
    NegBinom {
        w: Vec<f64>,
        c: f64,
        alpha: f64,
    },
    LogNormal {
        w: Vec<f64>,
        c: f64,
        sigma: f64,
    },
    Mixture3 {
        wz: [Vec<f64>; 3],
        cz: [f64; 3],
        w_mu3: Vec<f64>,
        c_mu3: f64,
        sigmas: [f64; 3],
    },
}

fn check_len(spec: &SubProgramSpec, v: &[f64], expected: usize) -> Result<(), SubProgramError> {
    if v.len() != expected {
        return Err(SubProgramError::Dimension {
            subprogram: spec.name.name(),
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

fn check_finite(spec: &SubProgramSpec, v: &[f64]) -> Result<(), SubProgramError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(SubProgramError::NonFinite {
            subprogram: spec.name.name(),
            index,
        }),
        None => Ok(()),
    }
}

pub fn constrain(theta: &[f64], spec: &SubProgramSpec) -> Result<Constrained, SubProgramError> {
    let k = spec.input_dim;
    check_len(spec, theta, spec.layout().total_dim)?;
    check_finite(spec, theta)?;
    let w = |s: usize| theta[s..s + k].to_vec();
    Ok(match spec.family {
        Family::BernoulliGlm => Constrained::Bernoulli { w: w(0), c: theta[k] },
        Family::CensoredNegBinomGlm => Constrained::NegBinom {
            w: w(0),
            c: theta[k],
            alpha: theta[k + 1].exp(),
        },
        Family::LogNormalGlm => Constrained::LogNormal {
            w: w(0),
            c: theta[k],
            sigma: theta[k + 1].exp(),
        },
        Family::LogNormalMixture3Glm => Constrained::Mixture3 {
            wz: [w(0), w(k), w(2 * k)],
            cz: [theta[3 * k], theta[3 * k + 1], theta[3 * k + 2]],
            w_mu3: w(3 * k + 3),
            c_mu3: theta[4 * k + 3],
            sigmas: [theta[4 * k + 4].exp(), theta[4 * k + 5].exp(), theta[4 * k + 6].exp()],
        },
    })
}

pub fn unconstrain(params: &Constrained, spec: &SubProgramSpec) -> Result<Vec<f64>, SubProgramError> {
    let positive = |v: f64| -> Result<f64, SubProgramError> {
        if v > 0.0 && v.is_finite() {
            Ok(v.ln())
        } else {
            Err(spec.err(format!("scale parameter {v} must be positive")))
        }
    };
    let mut out = Vec::with_capacity(spec.layout().total_dim);
    match (spec.family, params) {
        (Family::BernoulliGlm, Constrained::Bernoulli { w, c }) => {
            out.extend_from_slice(w);
            out.push(*c);
        }
        (Family::CensoredNegBinomGlm, Constrained::NegBinom { w, c, alpha }) => {
            out.extend_from_slice(w);
            out.push(*c);
            out.push(positive(*alpha)?);
        }
        (Family::LogNormalGlm, Constrained::LogNormal { w, c, sigma }) => {
            out.extend_from_slice(w);
            out.push(*c);
            out.push(positive(*sigma)?);
        }
        (
            Family::LogNormalMixture3Glm,
            Constrained::Mixture3 {
                wz,
                cz,
                w_mu3,
                c_mu3,
                sigmas,
            },
        ) => {
            for wk in wz {
                out.extend_from_slice(wk);
            }
            out.extend_from_slice(cz);
            out.extend_from_slice(w_mu3);
            out.push(*c_mu3);
            for s in sigmas {
                out.push(positive(*s)?);
            }
        }
        _ => return Err(spec.err("constrained parameters belong to another family")),
    }
    check_len(spec, &out, spec.layout().total_dim)?;
    Ok(out)
}

fn support_error(spec: &SubProgramSpec, y: Outcome) -> SubProgramError {
    SubProgramError::Support {
        subprogram: spec.name.name(),
        outcome: y.to_string(),
    }
}

/// Check that `y` lies in the family support.
pub fn check_support(spec: &SubProgramSpec, y: Outcome) -> Result<(), SubProgramError> {
    let ok = match (spec.family, y) {
        (Family::BernoulliGlm, Outcome::Bit(_)) => true,
        (Family::CensoredNegBinomGlm, Outcome::Count(c)) => c <= spec.censor_bound().get(),
        (Family::LogNormalGlm | Family::LogNormalMixture3Glm, Outcome::Positive(v)) => v > 0.0 && v.is_finite(),
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(support_error(spec, y))
    }
}

/// Per-datum log-likelihood as a function of the locals (see [`LocalMap`]).
/// `y` must already be in the support.
pub fn loglik_locals<S: Scalar>(spec: &SubProgramSpec, y: Outcome, locals: &[S]) -> S {
    match (spec.family, y) {
        (Family::BernoulliGlm, Outcome::Bit(b)) => bernoulli_logit_logpmf(b, locals[0]),
        (Family::CensoredNegBinomGlm, Outcome::Count(c)) => {
            censored_nb_logpmf_kernel(c, spec.censor_bound().get(), locals[0], locals[1])
        }
        (Family::LogNormalGlm, Outcome::Positive(d)) => lognormal_logpdf_kernel(d.ln(), locals[0], locals[1]),
        (Family::LogNormalMixture3Glm, Outcome::Positive(d)) => {
            let [m1, m2] = spec.mixture_mus();
            let l = locals[0];
            mixture3_logpdf_kernel(
                d.ln(),
                [locals[0], locals[1], locals[2]],
                [l.lift(m1), l.lift(m2), locals[3]],
                [locals[4], locals[5], locals[6]],
            )
        }
        _ => unreachable!("outcome checked against the family support"),
    }
}

/// Family parameters at input `x` for a constrained parameter bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Emission {
    Bernoulli { p: f64 },
    NegBinom(distributions::NegBinomParam, CensorBound),
    LogNormal(LogNormalParam),
    Mixture3(Mixture3Param),
}

fn emission_from_theta(spec: &SubProgramSpec, x: &[f64], theta: &[f64]) -> Result<Emission, SubProgramError> {
    let k = spec.input_dim;
    let dist = |source| SubProgramError::Dist {
        subprogram: spec.name.name(),
        source,
    };
    let eta = |s: usize, c: usize| dot(&theta[s..s + k], x) + theta[c];
    Ok(match spec.family {
        Family::BernoulliGlm => Emission::Bernoulli { p: logistic(eta(0, k)) },
        Family::CensoredNegBinomGlm => Emission::NegBinom(
            negbinom_from_glm(theta[k + 1].exp(), eta(0, k)).map_err(dist)?,
            spec.censor_bound(),
        ),
        Family::LogNormalGlm => Emission::LogNormal(LogNormalParam::new(eta(0, k), theta[k + 1].exp()).map_err(dist)?),
        Family::LogNormalMixture3Glm => {
            let [m1, m2] = spec.mixture_mus();
            let z = [eta(0, 3 * k), eta(k, 3 * k + 1), eta(2 * k, 3 * k + 2)];
            let mu3 = eta(3 * k + 3, 4 * k + 3);
            let sig = [theta[4 * k + 4].exp(), theta[4 * k + 5].exp(), theta[4 * k + 6].exp()];
            Emission::Mixture3(Mixture3Param::from_logits(z, [m1, m2, mu3], sig).map_err(dist)?)
        }
    })
}

/// Variational posterior over the unconstrained parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Posterior {
    Gaussian(GaussianChol),
    /// A degenerate posterior at one parameter vector.
    PointMass(Vec<f64>),
}

impl Posterior {
    pub fn dim(&self) -> usize {
        match self {
            Posterior::Gaussian(g) => g.dim(),
            Posterior::PointMass(v) => v.len(),
        }
    }

    pub fn mean(&self) -> &[f64] {
        match self {
            Posterior::Gaussian(g) => g.mean(),
            Posterior::PointMass(v) => v,
        }
    }
}

/// Independent normal prior on every unconstrained coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub stds: Vec<f64>,
}

impl Prior {
    pub fn standard(dim: usize) -> Self {
        Self { stds: vec![1.0; dim] }
    }

    /// Override the std of one named slice.
    pub fn with_slice_std(mut self, layout: &ParamLayout, name: &str, std: f64) -> Result<Self, String> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(format!("prior std {std} must be positive"));
        }
        let s = layout.slice(name).ok_or_else(|| format!("no slice named {name}"))?;
        for v in &mut self.stds[s.start..s.start + s.len] {
            *v = std;
        }
        Ok(self)
    }

    pub fn logpdf(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(&self.stds)
            .map(|(t, s)| {
                let z = t / s;
                -0.5 * z * z - s.ln() - HALF_LN_2PI
            })
            .sum()
    }

    /// Add `∂ log p / ∂θ` into `grad`.
    pub fn add_grad(&self, theta: &[f64], grad: &mut [f64]) {
        for ((g, t), s) in grad.iter_mut().zip(theta).zip(&self.stds) {
            *g -= t / (s * s);
        }
    }
}

/// A trained sub-program: spec plus posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedSubProgram {
    pub spec: SubProgramSpec,
    pub posterior: Posterior,
}

impl FittedSubProgram {
    pub fn new(spec: SubProgramSpec, posterior: Posterior) -> Result<Self, SubProgramError> {
        spec.validate_constants()?;
        check_len(&spec, posterior.mean(), spec.layout().total_dim)?;
        check_finite(&spec, posterior.mean())?;
        Ok(Self { spec, posterior })
    }

    pub fn point_mass(spec: SubProgramSpec, theta: Vec<f64>) -> Result<Self, SubProgramError> {
        Self::new(spec, Posterior::PointMass(theta))
    }

    pub fn id(&self) -> SubProgramId {
        self.spec.name
    }

    pub fn dim(&self) -> usize {
        self.posterior.dim()
    }

    /// Write one posterior draw into `out`.
    pub fn draw_theta_into(&self, rng: &mut SimRng, out: &mut Vec<f64>) {
        out.clear();
        match &self.posterior {
            Posterior::PointMass(v) => out.extend_from_slice(v),
            Posterior::Gaussian(g) => {
                let d = g.dim();
                out.extend_from_slice(g.mean());
                // eps is consumed row by row, so row i only needs eps[..=i].
                let mut eps = Vec::with_capacity(d);
                let chol = g.chol();
                for i in 0..d {
                    eps.push(rng.standard_normal());
                    out[i] += dot(&chol[i * d..i * d + i + 1], &eps);
                }
            }
        }
    }

    pub fn draw_theta(&self, rng: &mut SimRng) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        self.draw_theta_into(rng, &mut v);
        v
    }

    fn check_x(&self, x: &[f64]) -> Result<(), SubProgramError> {
        check_len(&self.spec, x, self.spec.input_dim)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), SubProgramError> {
        check_len(&self.spec, theta, self.dim())
    }

    pub fn emission(&self, x: &[f64], theta: &[f64]) -> Result<Emission, SubProgramError> {
        self.check_x(x)?;
        self.check_theta(theta)?;
        emission_from_theta(&self.spec, x, theta)
    }

    /// Sample an outcome at `x`. Without `theta`, a fresh parameter vector is
    /// drawn from the posterior first.
    pub fn predictive_sample(&self, rng: &mut SimRng, x: &[f64], theta: Option<&[f64]>) -> Result<Outcome, SubProgramError> {
        let drawn;
        let theta = match theta {
            Some(t) => t,
            None => {
                drawn = self.draw_theta(rng);
                &drawn
            }
        };
        Ok(match self.emission(x, theta)? {
            Emission::Bernoulli { p } => Outcome::Bit(rng.uniform() < p),
            Emission::NegBinom(param, bound) => Outcome::Count(censored_nb_sample(rng, &param, bound)),
            Emission::LogNormal(param) => Outcome::Positive(lognormal_sample(rng, &param)),
            Emission::Mixture3(param) => Outcome::Positive(mixture3_sample(rng, &param)),
        })
    }

    /// Positive-valued draw conditioned on `value ≥ lower`.
    pub fn predictive_sample_truncated(
        &self,
        rng: &mut SimRng,
        x: &[f64],
        theta: Option<&[f64]>,
        lower: f64,
    ) -> Result<f64, SubProgramError> {
        let drawn;
        let theta = match theta {
            Some(t) => t,
            None => {
                drawn = self.draw_theta(rng);
                &drawn
            }
        };
        let dist = |source| SubProgramError::Dist {
            subprogram: self.spec.name.name(),
            source,
        };
        match self.emission(x, theta)? {
            Emission::LogNormal(param) => lognormal_sample_truncated(rng, &param, lower).map_err(dist),
            Emission::Mixture3(param) => mixture3_sample_truncated(rng, &param, lower).map_err(dist),
            _ => Err(self.spec.err("truncated sampling needs a positive-valued family")),
        }
    }

    /// `P(Y = 1)` for a Bernoulli sub-program at a fixed parameter vector.
    pub fn bernoulli_prob(&self, x: &[f64], theta: &[f64]) -> Result<f64, SubProgramError> {
        match self.emission(x, theta)? {
            Emission::Bernoulli { p } => Ok(p),
            _ => Err(self.spec.err("not a Bernoulli sub-program")),
        }
    }

    /// Log-likelihood of `y` at `x` under an unconstrained parameter vector.
    pub fn loglik_theta(&self, y: Outcome, x: &[f64], theta: &[f64]) -> Result<f64, SubProgramError> {
        check_support(&self.spec, y)?;
        loglik_point(y, x, &constrain(theta, &self.spec)?, &self.spec)
    }

    /// `ln (1/S) Σ_s p(y | x, θ_s)` with `θ_s` drawn from the posterior.
    pub fn predictive_loglik(&self, y: Outcome, x: &[f64], draws: usize, rng: &mut SimRng) -> Result<f64, SubProgramError> {
        let draws = draws.max(1);
        if let Posterior::PointMass(theta) = &self.posterior {
            return self.loglik_theta(y, x, theta);
        }
        let mut buf = Vec::with_capacity(self.dim());
        let mut terms = Vec::with_capacity(draws);
        for _ in 0..draws {
            self.draw_theta_into(rng, &mut buf);
            terms.push(self.loglik_theta(y, x, &buf)?);
        }
        Ok(log_sum_exp_f64(&terms) - (draws as f64).ln())
    }

    /// Log-likelihood at the posterior mean.
    pub fn loglik_at_mean(&self, y: Outcome, x: &[f64]) -> Result<f64, SubProgramError> {
        self.loglik_theta(y, x, self.posterior.mean())
    }
}

/// Family log-density at constrained parameters.
pub fn loglik_point(y: Outcome, x: &[f64], theta: &Constrained, spec: &SubProgramSpec) -> Result<f64, SubProgramError> {
    check_len(spec, x, spec.input_dim)?;
    check_support(spec, y)?;
    let dist = |source| SubProgramError::Dist {
        subprogram: spec.name.name(),
        source,
    };
    Ok(match (theta, y) {
        (Constrained::Bernoulli { w, c }, Outcome::Bit(b)) => bernoulli_logit_logpmf(b, dot(w, x) + c),
        (Constrained::NegBinom { w, c, alpha }, Outcome::Count(n)) => {
            let param = negbinom_from_glm(*alpha, dot(w, x) + c).map_err(dist)?;
            censored_nb_logpmf(n as i64, &param, spec.censor_bound()).map_err(dist)?
        }
        (Constrained::LogNormal { w, c, sigma }, Outcome::Positive(d)) => {
            let param = LogNormalParam::new(dot(w, x) + c, *sigma).map_err(dist)?;
            distributions::lognormal_logpdf(d, &param).map_err(dist)?
        }
        (
            Constrained::Mixture3 {
                wz,
                cz,
                w_mu3,
                c_mu3,
                sigmas,
            },
            Outcome::Positive(d),
        ) => {
            let [m1, m2] = spec.mixture_mus();
            let z: [f64; 3] = std::array::from_fn(|i| dot(&wz[i], x) + cz[i]);
            let param = Mixture3Param::from_logits(z, [m1, m2, dot(w_mu3, x) + c_mu3], *sigmas).map_err(dist)?;
            mixture3_logpdf(d, &param).map_err(dist)?
        }
        _ => return Err(spec.err("parameters belong to another family")),
    })
}

/// The thirteen fitted sub-programs, indexed by [`SubProgramId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    programs: Vec<FittedSubProgram>,
}

impl Registry {
    pub fn new(programs: Vec<FittedSubProgram>) -> Result<Self, SubProgramError> {
        let mut slots: Vec<Option<FittedSubProgram>> = vec![None; SubProgramId::ALL.len()];
        for p in programs {
            let i = p.id().index();
            if slots[i].is_some() {
                return Err(SubProgramError::Duplicate(p.id().name()));
            }
            p.spec.validate()?;
            slots[i] = Some(p);
        }
        let programs = slots
            .into_iter()
            .zip(SubProgramId::ALL)
            .map(|(p, id)| p.ok_or(SubProgramError::Missing(id.name())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { programs })
    }

    pub fn get(&self, id: SubProgramId) -> &FittedSubProgram {
        &self.programs[id.index()]
    }

    pub fn get_mut(&mut self, id: SubProgramId) -> &mut FittedSubProgram {
        &mut self.programs[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &FittedSubProgram> {
        self.programs.iter()
    }

    /// Replace one sub-program, keeping the rest.
    pub fn with(mut self, program: FittedSubProgram) -> Result<Self, SubProgramError> {
        program.spec.validate()?;
        let i = program.id().index();
        self.programs[i] = program;
        Ok(self)
    }

    /// Every sub-program as a point mass at its posterior mean.
    pub fn at_mean(&self) -> Self {
        Self {
            programs: self
                .programs
                .iter()
                .map(|p| FittedSubProgram {
                    spec: p.spec.clone(),
                    posterior: Posterior::PointMass(p.posterior.mean().to_vec()),
                })
                .collect(),
        }
    }

    /// Every posterior mean.
    pub fn mean_bundle(&self) -> ThetaBundle {
        ThetaBundle {
            thetas: self.programs.iter().map(|p| p.posterior.mean().to_vec()).collect(),
        }
    }

    /// One posterior draw per sub-program.
    pub fn draw_bundle(&self, rng: &mut SimRng) -> ThetaBundle {
        ThetaBundle {
            thetas: self.programs.iter().map(|p| p.draw_theta(rng)).collect(),
        }
    }
}

/// A fixed parameter vector for every sub-program.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBundle {
    thetas: Vec<Vec<f64>>,
}

impl ThetaBundle {
    pub fn get(&self, id: SubProgramId) -> &[f64] {
        &self.thetas[id.index()]
    }
}
