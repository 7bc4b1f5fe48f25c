//! Scalar probability distributions used by the sub-programs.
//!
//! Each family has a plain `f64` API (parameter structs, log-densities,
//! samplers) and a generic kernel written against [`Scalar`] so the trainer
//! can differentiate exactly the expression used for evaluation.
//!
//! Negative Binomial convention: `NB(n, p)` counts failures before the
//! `n`-th success with success probability `p`, so that with
//! `n = 1/α` and `p = 1/(1 + αμ)` the mean is `μ` and the variance is
//! `μ + αμ²`.

use rand_distr::{Distribution, Gamma, Poisson};
use statrs::function::erf::{erfc, erfc_inv};
use thiserror::Error;

use crate::rng::SimRng;
use crate::scalar::{log_sum_exp, log_sum_exp_f64, softplus_f64, Scalar};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
/// Cap applied to `exp(eta)` for Negative Binomial means.
pub const NB_MEAN_CAP: f64 = 1e12;
/// Smallest total tail mass a truncated sampler accepts.
pub const MIN_TAIL_MASS: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("tail exhausted: log tail mass {log_mass} above lower bound {lower}")]
    TailExhausted { lower: f64, log_mass: f64 },
}

pub type Result<T> = std::result::Result<T, DistError>;

/// Logistic function, saturating cleanly for large `|x|`.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernoulliParam {
    p: f64,
}

impl BernoulliParam {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(DistError::Domain(format!("bernoulli p={p} outside [0,1]")));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn sample(&self, rng: &mut SimRng) -> bool {
        rng.uniform() < self.p
    }
}

pub fn bernoulli_logpmf(y: bool, p: f64) -> f64 {
    let mass = if y { p } else { 1.0 - p };
    if mass <= 0.0 {
        f64::NEG_INFINITY
    } else {
        mass.ln()
    }
}

/// Bernoulli log-pmf parameterized by the logit, stable for large `|eta|`.
pub fn bernoulli_logit_logpmf<S: Scalar>(y: bool, eta: S) -> S {
    if y {
        -(-eta).softplus()
    } else {
        -eta.softplus()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegBinomParam {
    pub n: f64,
    pub p: f64,
    pub mu: f64,
    pub alpha: f64,
    /// Set when `exp(eta)` exceeded [`NB_MEAN_CAP`] and was clamped.
    pub saturated: bool,
}

impl NegBinomParam {
    pub fn variance(&self) -> f64 {
        self.mu + self.alpha * self.mu * self.mu
    }
}

pub fn negbinom_from_glm(alpha: f64, eta: f64) -> Result<NegBinomParam> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(DistError::Domain(format!("overdispersion alpha={alpha} must be > 0")));
    }
    if eta.is_nan() {
        return Err(DistError::Domain("linear predictor is NaN".into()));
    }
    let raw = eta.exp();
    let (mu, saturated) = if raw > NB_MEAN_CAP {
        (NB_MEAN_CAP, true)
    } else {
        (raw, false)
    };
    Ok(NegBinomParam {
        n: 1.0 / alpha,
        p: 1.0 / (1.0 + alpha * mu),
        mu,
        alpha,
        saturated,
    })
}

/// Censoring threshold `t`: outcomes at or above `t` are recorded as `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct CensorBound(u32);

impl CensorBound {
    pub const ANTIBIOTIC_DAYS: CensorBound = CensorBound(30);
    pub const ICU_DAYS: CensorBound = CensorBound(7);

    pub fn new(t: u32) -> Result<Self> {
        if t == 0 {
            return Err(DistError::Domain("censor bound must be >= 1".into()));
        }
        Ok(Self(t))
    }

    pub fn get(&self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for CensorBound {
    type Error = DistError;
    fn try_from(t: u32) -> Result<Self> {
        CensorBound::new(t)
    }
}

impl From<CensorBound> for u32 {
    fn from(b: CensorBound) -> u32 {
        b.0
    }
}

/// Above this much mass below the bound, the censored tail is summed term
/// by term instead of taken as a complement.
const DIRECT_TAIL_BELOW: f64 = 0.9;
const MAX_TAIL_TERMS: u32 = 100_000;

/// Censored Negative Binomial log-pmf in terms of `ln μ` and `ln α`.
///
/// Below the bound this is the NB log-pmf; at the bound it is the log of
/// `1 - Σ_{k<t} P(k)`.
pub fn censored_nb_logpmf_kernel<S: Scalar>(y: u32, t: u32, log_mu: S, log_alpha: S) -> S {
    let log_alpha_mu = log_alpha + log_mu;
    let log1p_alpha_mu = log_alpha_mu.softplus();
    let n = (-log_alpha).exp();
    let log_p = -log1p_alpha_mu;
    let log_q = log_alpha_mu - log1p_alpha_mu;
    let lg_n = n.ln_gamma();
    let n_log_p = n * log_p;
    let term = |k: u32| -> S {
        let kf = k as f64;
        (n + kf).ln_gamma() - lg_n + n_log_p + log_q * kf - statrs::function::gamma::ln_gamma(kf + 1.0)
    };
    if y < t {
        return term(y);
    }
    let mut below = term(0).exp();
    for k in 1..t {
        below = below + term(k).exp();
    }
    if below.value() < DIRECT_TAIL_BELOW {
        return (-below).ln_1p();
    }
    // Small tail: `1 - below` cancels, so sum P(k), k >= t, in log space
    // until the geometric remainder bound is negligible.
    let q = log_q.value().exp();
    let mut lt = term(t);
    let mut terms = vec![lt];
    let mut top = lt.value();
    for k in t..t.saturating_add(MAX_TAIL_TERMS) {
        let step = (n + k as f64).ln() - ((k + 1) as f64).ln() + log_q;
        let r = step.value().exp().max(q);
        lt = lt + step;
        terms.push(lt);
        top = top.max(lt.value());
        if r < 1.0 && lt.value() + (r / (1.0 - r)).ln() < top - 40.0 {
            break;
        }
    }
    log_sum_exp(&terms).expect("at least one term")
}

pub fn censored_nb_logpmf(y: i64, param: &NegBinomParam, bound: CensorBound) -> Result<f64> {
    let t = bound.get();
    if y < 0 || y > t as i64 {
        return Err(DistError::Domain(format!("count {y} outside [0, {t}]")));
    }
    let log_mu = param.mu.ln();
    let log_alpha = param.alpha.ln();
    Ok(censored_nb_logpmf_kernel(y as u32, t, log_mu, log_alpha))
}

/// Clamp an uncensored count to the bound.
pub fn censor(raw: u64, bound: CensorBound) -> u32 {
    raw.min(bound.get() as u64) as u32
}

/// Uncensored NB draw via the Gamma–Poisson mixture.
pub fn negbinom_sample(rng: &mut SimRng, param: &NegBinomParam) -> u64 {
    let scale = param.alpha * param.mu;
    if !(scale > 0.0) {
        return 0;
    }
    let rate = match Gamma::new(param.n, scale) {
        Ok(g) => g.sample(rng),
        Err(_) => return 0,
    };
    if !(rate > 0.0) {
        return 0;
    }
    match Poisson::new(rate) {
        Ok(p) => {
            let v: f64 = p.sample(rng);
            if v >= u64::MAX as f64 {
                u64::MAX
            } else {
                v as u64
            }
        }
        Err(_) => u64::MAX,
    }
}

pub fn censored_nb_sample(rng: &mut SimRng, param: &NegBinomParam, bound: CensorBound) -> u32 {
    censor(negbinom_sample(rng, param), bound)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalParam {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormalParam {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(DistError::Domain(format!("lognormal mu={mu} sigma={sigma}")));
        }
        Ok(Self { mu, sigma })
    }
}

pub fn lognormal_logpdf_kernel<S: Scalar>(ln_d: f64, mu: S, log_sigma: S) -> S {
    let z = (mu - ln_d) / log_sigma.exp();
    -(z.square() * 0.5) - log_sigma - (ln_d + HALF_LN_2PI)
}

pub fn lognormal_logpdf(d: f64, param: &LogNormalParam) -> Result<f64> {
    if !(d > 0.0) {
        return Err(DistError::Domain(format!("lognormal support requires d > 0, got {d}")));
    }
    Ok(lognormal_logpdf_kernel(d.ln(), param.mu, param.sigma.ln()))
}

pub fn lognormal_sample(rng: &mut SimRng, param: &LogNormalParam) -> f64 {
    (param.mu + param.sigma * rng.standard_normal()).exp()
}

/// `ln P(Z > z)` for a standard normal `Z`.
pub fn normal_log_sf(z: f64) -> f64 {
    if z == f64::NEG_INFINITY {
        return 0.0;
    }
    if z < 37.0 {
        (0.5 * erfc(z / std::f64::consts::SQRT_2)).ln()
    } else {
        // Mills-ratio expansion; erfc underflows past this point.
        let z2 = z * z;
        -0.5 * z2 - z.ln() - HALF_LN_2PI + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

/// Inverse of the standard normal survival function.
pub fn normal_inv_sf(q: f64) -> f64 {
    std::f64::consts::SQRT_2 * erfc_inv(2.0 * q)
}

fn standard_normal_truncated_below(rng: &mut SimRng, z_lo: f64, log_sf_lo: f64) -> f64 {
    let u = rng.open01();
    let z = if z_lo == f64::NEG_INFINITY {
        normal_inv_sf(u)
    } else if z_lo < 0.0 {
        // Upper-tail mass is large; invert through the CDF side instead.
        let cdf_lo = 0.5 * erfc(-z_lo / std::f64::consts::SQRT_2);
        let p = cdf_lo + u * (1.0 - cdf_lo);
        -normal_inv_sf(p.min(1.0 - 1e-16))
    } else {
        normal_inv_sf((log_sf_lo.exp() * u).max(f64::MIN_POSITIVE))
    };
    if z.is_nan() {
        z_lo
    } else {
        z.max(z_lo)
    }
}

/// Lower-truncated log-normal draw by inverse CDF. Never returns less than
/// `lower`.
pub fn lognormal_sample_truncated(rng: &mut SimRng, param: &LogNormalParam, lower: f64) -> Result<f64> {
    if !(lower >= 0.0) {
        return Err(DistError::Domain(format!("truncation bound {lower} must be >= 0")));
    }
    let z_lo = if lower == 0.0 {
        f64::NEG_INFINITY
    } else {
        (lower.ln() - param.mu) / param.sigma
    };
    let log_mass = normal_log_sf(z_lo);
    if log_mass < MIN_TAIL_MASS.ln() {
        return Err(DistError::TailExhausted { lower, log_mass });
    }
    let z = standard_normal_truncated_below(rng, z_lo, log_mass);
    Ok((param.mu + param.sigma * z).exp().max(lower))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mixture3Param {
    pub weights: [f64; 3],
    pub mus: [f64; 3],
    pub sigmas: [f64; 3],
}

pub fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

impl Mixture3Param {
    pub fn new(weights: [f64; 3], mus: [f64; 3], sigmas: [f64; 3]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(DistError::Domain(format!("mixture weights {weights:?} not on the simplex")));
        }
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || mus.iter().any(|m| !m.is_finite()) {
            return Err(DistError::Domain(format!("mixture components mus={mus:?} sigmas={sigmas:?}")));
        }
        Ok(Self { weights, mus, sigmas })
    }

    pub fn from_logits(z: [f64; 3], mus: [f64; 3], sigmas: [f64; 3]) -> Result<Self> {
        Self::new(softmax3(z), mus, sigmas)
    }

    fn component(&self, k: usize) -> LogNormalParam {
        LogNormalParam {
            mu: self.mus[k],
            sigma: self.sigmas[k],
        }
    }
}

/// Mixture log-density from component logits, locations, and log-scales.
pub fn mixture3_logpdf_kernel<S: Scalar>(ln_d: f64, logits: [S; 3], mus: [S; 3], log_sigmas: [S; 3]) -> S {
    let norm = log_sum_exp(&logits).expect("three logits");
    let parts: [S; 3] = std::array::from_fn(|k| logits[k] - norm + lognormal_logpdf_kernel(ln_d, mus[k], log_sigmas[k]));
    log_sum_exp(&parts).expect("three components")
}

pub fn mixture3_logpdf(d: f64, param: &Mixture3Param) -> Result<f64> {
    if !(d > 0.0) {
        return Err(DistError::Domain(format!("mixture support requires d > 0, got {d}")));
    }
    let ln_d = d.ln();
    let parts: [f64; 3] = std::array::from_fn(|k| {
        param.weights[k].ln() + lognormal_logpdf_kernel(ln_d, param.mus[k], param.sigmas[k].ln())
    });
    Ok(log_sum_exp_f64(&parts))
}

fn pick_component(rng: &mut SimRng, probs: &[f64; 3]) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding left u above the cumulative sum: take the last positive weight.
    (0..3).rev().find(|&k| probs[k] > 0.0).unwrap_or(2)
}

pub fn mixture3_sample(rng: &mut SimRng, param: &Mixture3Param) -> f64 {
    let k = pick_component(rng, &param.weights);
    lognormal_sample(rng, &param.component(k))
}

/// Exact lower-truncated mixture draw: components are reweighted by their
/// tail mass above `lower`, then one is sampled by inverse CDF.
pub fn mixture3_sample_truncated(rng: &mut SimRng, param: &Mixture3Param, lower: f64) -> Result<f64> {
    if !(lower >= 0.0) {
        return Err(DistError::Domain(format!("truncation bound {lower} must be >= 0")));
    }
    let ln_lower = lower.ln();
    let log_w: [f64; 3] = std::array::from_fn(|k| {
        let z_lo = (ln_lower - param.mus[k]) / param.sigmas[k];
        param.weights[k].ln() + normal_log_sf(z_lo)
    });
    let total = log_sum_exp_f64(&log_w);
    if !(total >= MIN_TAIL_MASS.ln()) {
        return Err(DistError::TailExhausted { lower, log_mass: total });
    }
    let probs: [f64; 3] = std::array::from_fn(|k| (log_w[k] - total).exp());
    let k = pick_component(rng, &probs);
    lognormal_sample_truncated(rng, &param.component(k), lower)
}

/// Multivariate normal with a lower-triangular Cholesky factor (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianChol {
    mean: Vec<f64>,
    chol: Vec<f64>,
}

impl GaussianChol {
    pub fn new(mean: Vec<f64>, chol: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if chol.len() != d * d {
            return Err(DistError::DimensionMismatch {
                expected: d * d,
                got: chol.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(DistError::Domain("non-finite mean".into()));
        }
        for i in 0..d {
            for j in 0..d {
                let v = chol[i * d + j];
                if j > i && v != 0.0 {
                    return Err(DistError::Domain(format!("cholesky entry ({i},{j}) above diagonal")));
                }
                if !v.is_finite() {
                    return Err(DistError::Domain(format!("cholesky entry ({i},{j}) not finite")));
                }
            }
            if !(chol[i * d + i] > 0.0) {
                return Err(DistError::Domain(format!("cholesky diagonal {i} not positive")));
            }
        }
        Ok(Self { mean, chol })
    }

    pub fn isotropic(mean: Vec<f64>, scale: f64) -> Result<Self> {
        let d = mean.len();
        let mut chol = vec![0.0; d * d];
        for i in 0..d {
            chol[i * d + i] = scale;
        }
        Self::new(mean, chol)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Row-major `D×D` lower-triangular factor.
    pub fn chol(&self) -> &[f64] {
        &self.chol
    }

    pub fn chol_at(&self, i: usize, j: usize) -> f64 {
        self.chol[i * self.dim() + j]
    }

    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..=j {
                    s += self.chol[i * d + k] * self.chol[j * d + k];
                }
                cov[i * d + j] = s;
                cov[j * d + i] = s;
            }
        }
        cov
    }

    pub fn log_det_cov(&self) -> f64 {
        let d = self.dim();
        2.0 * (0..d).map(|i| self.chol[i * d + i].ln()).sum::<f64>()
    }

    /// `mean + L·eps`.
    pub fn transform(&self, eps: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if eps.len() != d {
            return Err(DistError::DimensionMismatch { expected: d, got: eps.len() });
        }
        let mut out = self.mean.clone();
        for i in 0..d {
            let row = &self.chol[i * d..i * d + i + 1];
            out[i] += row.iter().zip(eps).map(|(l, e)| l * e).sum::<f64>();
        }
        Ok(out)
    }

    /// Reparameterized draw; `eps` is drawn from `N(0, I)` when absent.
    pub fn sample_reparam(&self, rng: &mut SimRng, eps: Option<&[f64]>) -> Result<Vec<f64>> {
        match eps {
            Some(e) => self.transform(e),
            None => {
                let e: Vec<f64> = (0..self.dim()).map(|_| rng.standard_normal()).collect();
                self.transform(&e)
            }
        }
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(DistError::DimensionMismatch { expected: d, got: x.len() });
        }
        // Forward substitution L z = x - mean.
        let mut z = vec![0.0; d];
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol[i * d + k] * z[k];
            }
            z[i] = s / self.chol[i * d + i];
        }
        let quad: f64 = z.iter().map(|v| v * v).sum();
        Ok(-0.5 * quad - 0.5 * self.log_det_cov() - d as f64 * HALF_LN_2PI)
    }
}

/// `ln(1 + e^x)` for `f64`, exposed for callers that work on logits.
pub fn softplus(x: f64) -> f64 {
    softplus_f64(x)
}
