//! Scalar special functions and empirical-distribution utilities.
//!
//! Gaussian and gamma-family kernels evaluate in `f64` (backed by `statrs`)
//! and convert at the boundary, so `f32` callers get `f64`-quality values.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZapError};
use crate::scalar::Scalar;

/// A probability strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
#[repr(transparent)]
pub struct UnitInterval<F>(F);

impl<F: Scalar> UnitInterval<F> {
    /// Clamps `v` into `[eps_u, 1 - eps_u]`. Values outside `[0, 1]` or NaN
    /// are rejected.
    pub fn clamped(v: F) -> Result<Self> {
        if v.is_nan() || v < F::zero() || v > F::one() {
            return Err(ZapError::Domain(format!("u-value {v} outside [0, 1]")));
        }
        Ok(Self(clamp_unit(v)))
    }

    /// Wraps a value the caller has already clamped.
    pub fn new(v: F) -> Result<Self> {
        let eps = F::eps_u();
        if !(v >= eps && v <= F::one() - eps) {
            return Err(ZapError::Domain(format!("u-value {v} outside the clamped unit interval")));
        }
        Ok(Self(v))
    }

    #[inline]
    pub fn get(self) -> F {
        self.0
    }
}

#[inline]
pub(crate) fn clamp_unit<F: Scalar>(v: F) -> F {
    let eps = F::eps_u();
    v.max(eps).min(F::one() - eps)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf<F: Scalar>(z: F) -> F {
    let z = z.as_f64();
    F::lit((-0.5 * z * z).exp() / (2.0 * PI).sqrt())
}

/// Standard normal distribution function.
#[inline]
pub fn normal_cdf<F: Scalar>(z: F) -> F {
    F::lit(normal_cdf_f64(z.as_f64()))
}

#[inline]
pub(crate) fn normal_cdf_f64(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal quantile function Φ⁻¹ on (0, 1).
pub fn normal_quantile<F: Scalar>(p: F) -> Result<F> {
    let p = p.as_f64();
    if !(p > 0.0 && p < 1.0) {
        return Err(ZapError::Domain(format!("normal quantile needs p in (0, 1), got {p}")));
    }
    Ok(F::lit(normal_quantile_f64(p)))
}

pub(crate) fn normal_quantile_f64(p: f64) -> f64 {
    if p > 0.5 {
        // 1 - p is exact here.
        return -lower_quantile(1.0 - p);
    }
    lower_quantile(p)
}

fn lower_quantile(p: f64) -> f64 {
    let x0 = -SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
    let dens = (-0.5 * x0 * x0).exp() / (2.0 * PI).sqrt();
    if dens <= 0.0 || !dens.is_finite() {
        return x0;
    }
    x0 - (normal_cdf_f64(x0) - p) / dens
}

/// `log B(a, b)` for positive arguments.
pub fn ln_beta<F: Scalar>(a: F, b: F) -> Result<F> {
    let (a, b) = (a.as_f64(), b.as_f64());
    if !(a > 0.0 && b > 0.0) {
        return Err(ZapError::Domain(format!("log-beta needs positive arguments, got ({a}, {b})")));
    }
    Ok(F::lit(ln_beta_f64(a, b)))
}

#[inline]
pub(crate) fn ln_beta_f64(a: f64, b: f64) -> f64 {
    libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)
}

/// `ln B(k, γ)` and its `k`-derivatives for one fixed `γ`.
///
/// For integer `γ`, `Γ(k + γ) / Γ(k) = k (k + 1) ⋯ (k + γ - 1)`, which
/// replaces the special functions by a product and two short sums.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BetaShapeKernel {
    gamma: f64,
    ln_gamma_g: f64,
    integer: Option<u32>,
}

impl BetaShapeKernel {
    const MAX_PRODUCT: f64 = 64.0;

    pub(crate) fn new(gamma: f64) -> Self {
        let integer = (gamma.fract() == 0.0 && (1.0..=Self::MAX_PRODUCT).contains(&gamma)).then_some(gamma as u32);
        let ln_gamma_g = match integer {
            Some(n) => (1..n).fold(1.0, |acc, j| acc * j as f64).ln(),
            None => libm::lgamma(gamma),
        };
        Self { gamma, ln_gamma_g, integer }
    }

    #[inline]
    pub(crate) fn ln_beta(&self, k: f64) -> f64 {
        match self.integer {
            Some(n) => self.ln_gamma_g - (0..n).fold(1.0, |acc, j| acc * (k + j as f64)).ln(),
            None => libm::lgamma(k) + self.ln_gamma_g - libm::lgamma(k + self.gamma),
        }
    }

    /// `ψ(k) - ψ(k + γ)`.
    #[inline]
    pub(crate) fn digamma_diff(&self, k: f64) -> f64 {
        match self.integer {
            Some(n) => -(0..n).map(|j| 1.0 / (k + j as f64)).sum::<f64>(),
            None => statrs::function::gamma::digamma(k) - statrs::function::gamma::digamma(k + self.gamma),
        }
    }

    /// `ψ'(k) - ψ'(k + γ)`.
    #[inline]
    pub(crate) fn trigamma_diff(&self, k: f64) -> f64 {
        match self.integer {
            Some(n) => (0..n).map(|j| 1.0 / ((k + j as f64) * (k + j as f64))).sum(),
            None => trigamma_f64(k) - trigamma_f64(k + self.gamma),
        }
    }
}

/// Digamma ψ(x) for x > 0.
pub fn digamma<F: Scalar>(x: F) -> Result<F> {
    let x = x.as_f64();
    if !(x > 0.0) {
        return Err(ZapError::Domain(format!("digamma needs x > 0, got {x}")));
    }
    Ok(F::lit(statrs::function::gamma::digamma(x)))
}

/// Trigamma ψ'(x) for x > 0.
pub fn trigamma<F: Scalar>(x: F) -> Result<F> {
    let x = x.as_f64();
    if !(x > 0.0) {
        return Err(ZapError::Domain(format!("trigamma needs x > 0, got {x}")));
    }
    Ok(F::lit(trigamma_f64(x)))
}

pub(crate) fn trigamma_f64(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    // Asymptotic series with Bernoulli numbers B2..B14.
    let tail = r
        + 0.5 * r2
        + r * r2 * (1.0 / 6.0 - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 * (1.0 / 30.0 - r2 * (5.0 / 66.0 - r2 * (691.0 / 2730.0 - r2 * 7.0 / 6.0))))));
    acc + tail
}

/// A sorted, non-empty sample used as an empirical distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSample<F> {
    values: Vec<F>,
}

impl<F: Scalar> EmpiricalSample<F> {
    pub fn new(mut values: Vec<F>) -> Result<Self> {
        if values.is_empty() {
            return Err(ZapError::EmptySample);
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(ZapError::InvalidInput("NaN in empirical sample".into()));
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn min(&self) -> F {
        self.values[0]
    }

    pub fn max(&self) -> F {
        self.values[self.values.len() - 1]
    }

    /// `#{v <= t} / N`.
    pub fn ecdf(&self, t: F) -> F {
        let count = self.values.partition_point(|v| *v <= t);
        F::from_usize_lossy(count) / F::from_usize_lossy(self.values.len())
    }

    /// Linearly interpolated quantile with plotting positions `(j - 1)/(N - 1)`.
    pub fn quantile(&self, q: F) -> Result<F> {
        if !(q >= F::zero() && q <= F::one()) {
            return Err(ZapError::Domain(format!("quantile level {q} outside [0, 1]")));
        }
        Ok(interpolate_sorted(self.values.len(), q, |j| self.values[j]))
    }
}

/// Quantile at level `q` of a sorted sequence of length `n`, read via `at`.
pub(crate) fn interpolate_sorted<F: Scalar>(n: usize, q: F, at: impl Fn(usize) -> F) -> F {
    if n == 1 {
        return at(0);
    }
    let last = n - 1;
    let h = q * F::from_usize_lossy(last);
    let nearest = h.round();
    // Snap rank-matched levels onto their order statistic.
    if (h - nearest).abs() <= F::lit(8.0) * F::epsilon() * nearest.max(F::one()) {
        let j = nearest.to_usize().unwrap_or(0).min(last);
        return at(j);
    }
    let lo = h.floor().to_usize().unwrap_or(0).min(last);
    if lo >= last {
        return at(last);
    }
    let frac = h - F::from_usize_lossy(lo);
    let a = at(lo);
    let b = at(lo + 1);
    a + frac * (b - a)
}

/// Free-function form of [`EmpiricalSample::quantile`].
pub fn empirical_quantile<F: Scalar>(sample: &EmpiricalSample<F>, q: F) -> Result<F> {
    sample.quantile(q)
}
