//! Scalar abstraction shared by plain `f64` evaluation and the reverse-mode
//! tape used for ELBO gradients.
//!
//! Log-density kernels are written once against [`Scalar`] so the value the
//! trainer differentiates is the same expression the evaluator reports.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant living in the same evaluation context as `self`.
    fn lift(&self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    /// `ln(1 + e^x)`, evaluated without overflow.
    fn softplus(self) -> Self;
    fn ln_gamma(self) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

pub(crate) fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Scalar for f64 {
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn lift(&self, c: f64) -> Self {
        c
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    #[inline]
    fn ln_gamma(self) -> Self {
        statrs::function::gamma::ln_gamma(self)
    }
}

/// Numerically stable `ln Σ exp(xᵢ)`. Returns `-∞` for an empty slice or
/// when every term is `-∞`.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> Option<S> {
    let first = *xs.first()?;
    let m = xs
        .iter()
        .map(|x| x.value())
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Some(first.lift(f64::NEG_INFINITY));
    }
    if m == f64::INFINITY {
        return Some(first.lift(f64::INFINITY));
    }
    let mut acc = (first - m).exp();
    for &x in &xs[1..] {
        acc = acc + (x - m).exp();
    }
    Some(acc.ln() + m)
}

pub fn log_sum_exp_f64(xs: &[f64]) -> f64 {
    log_sum_exp(xs).unwrap_or(f64::NEG_INFINITY)
}
