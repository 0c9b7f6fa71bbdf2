use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point type the procedures are written against: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite scalar")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }

    /// Clamping width keeping u-values strictly inside (0, 1).
    ///
    /// 1e-15 for `f64`; for `f32` the machine epsilon, since `1 - 1e-15`
    /// rounds to one.
    #[inline]
    fn eps_u() -> Self {
        Self::lit(EPS_U).max(Self::epsilon())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Nominal u-value clamping width.
pub const EPS_U: f64 = 1e-15;

/// `log(exp(a) + exp(b))` without overflow.
#[inline]
pub(crate) fn log_add_exp<F: Scalar>(a: F, b: F) -> F {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == F::neg_infinity() {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum<F: Scalar>(values: impl IntoIterator<Item = F>) -> F {
    let mut sum = F::zero();
    let mut comp = F::zero();
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp = comp + ((sum - t) + v);
        } else {
            comp = comp + ((v - t) + sum);
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_u_per_precision() {
        assert_eq!(f64::eps_u(), 1e-15);
        assert_eq!(f32::eps_u(), f32::EPSILON);
        assert!(1.0f32 - f32::eps_u() < 1.0);
    }

    #[test]
    fn log_add_exp_matches_direct() {
        let v: f64 = log_add_exp(0.3f64.ln(), 0.2f64.ln());
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, -2.0), -2.0);
        assert!(log_add_exp(800.0f64, 800.0).is_finite());
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let s: f64 = compensated_sum([1e16, 1.0, -1e16, 1.0]);
        assert_eq!(s, 2.0);
    }
}
