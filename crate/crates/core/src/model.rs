//! The three-component beta-mixture working model on the u-scale and the
//! assessor function it induces.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZapError};
use crate::numeric::{clamp_unit, ln_beta_f64, normal_cdf, BetaShapeKernel, normal_quantile, UnitInterval};
use crate::scalar::{log_add_exp, Scalar};

/// Linear predictors are clamped to this range before exponentiation.
pub const PREDICTOR_CLAMP: f64 = 35.0;

/// Default fixed shapes (γ_l, γ_r).
pub const DEFAULT_GAMMA: f64 = 4.0;

/// Observed hypotheses: u-values, covariate rows and (optionally) the
/// z-values they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TestingInput<F> {
    u: Vec<F>,
    z: Option<Vec<F>>,
    covariates: Vec<F>,
    p: usize,
    clamped: usize,
}

impl<F: Scalar> TestingInput<F> {
    /// Builds from z-values; `covariates` is row-major `m x p`.
    pub fn from_z(z: Vec<F>, covariates: Vec<F>, p: usize) -> Result<Self> {
        let mut clamped = 0;
        let mut u = Vec::with_capacity(z.len());
        for (i, &zi) in z.iter().enumerate() {
            if zi.is_nan() {
                return Err(ZapError::NonFinite { index: i, what: "z-value" });
            }
            let raw = normal_cdf(zi);
            let c = clamp_unit(raw);
            if c != raw {
                clamped += 1;
            }
            u.push(c);
        }
        Self::assemble(u, Some(z), covariates, p, clamped)
    }

    /// Builds from u-values in `[0, 1]`, clamping onto the open interval.
    pub fn from_u(u: Vec<F>, covariates: Vec<F>, p: usize) -> Result<Self> {
        let mut clamped = 0;
        let mut out = Vec::with_capacity(u.len());
        for (i, &ui) in u.iter().enumerate() {
            let c = UnitInterval::clamped(ui)
                .map_err(|_| ZapError::InvalidInput(format!("u-value {ui} at hypothesis {i} outside [0, 1]")))?
                .get();
            if c != ui {
                clamped += 1;
            }
            out.push(c);
        }
        Self::assemble(out, None, covariates, p, clamped)
    }

    /// Intercept-only data set.
    pub fn from_z_only(z: Vec<F>) -> Result<Self> {
        Self::from_z(z, Vec::new(), 0)
    }

    fn assemble(u: Vec<F>, z: Option<Vec<F>>, covariates: Vec<F>, p: usize, clamped: usize) -> Result<Self> {
        let m = u.len();
        if m == 0 {
            return Err(ZapError::InvalidInput("no hypotheses".into()));
        }
        if covariates.len() != m * p {
            return Err(ZapError::Dimension { expected: m * p, got: covariates.len() });
        }
        if let Some(i) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(ZapError::NonFinite { index: i / p.max(1), what: "covariate" });
        }
        Ok(Self { u, z, covariates, p, clamped })
    }

    pub fn m(&self) -> usize {
        self.u.len()
    }

    /// Covariate dimension (without the intercept).
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn u_values(&self) -> &[F] {
        &self.u
    }

    pub fn z_values(&self) -> Option<&[F]> {
        self.z.as_deref()
    }

    pub fn covariates(&self) -> &[F] {
        &self.covariates
    }

    /// Number of u-values moved onto the clamped interval.
    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    #[inline]
    pub fn u(&self, i: usize) -> F {
        self.u[i]
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[F] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }

    /// z-value of hypothesis `i`, recovered from its u-value when absent.
    pub fn z(&self, i: usize) -> F {
        match &self.z {
            Some(z) => z[i],
            None => normal_quantile(self.u[i]).expect("clamped u-value"),
        }
    }

    /// Two-sided p-values `2 Φ(-|Z|)`.
    pub fn p_values(&self) -> Vec<F> {
        (0..self.m())
            .map(|i| F::lit(2.0) * normal_cdf(-self.z(i).abs()))
            .collect()
    }

    /// Reorders hypotheses; `order[k]` is the source index of new index `k`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.m() {
            return Err(ZapError::Dimension { expected: self.m(), got: order.len() });
        }
        let u = order.iter().map(|&i| self.u[i]).collect();
        let z = self.z.as_ref().map(|z| order.iter().map(|&i| z[i]).collect());
        let covariates = order.iter().flat_map(|&i| self.x(i).iter().copied()).collect();
        Ok(Self { u, z, covariates, p: self.p, clamped: self.clamped })
    }
}

/// Which beta component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Working-model coefficients. Every coefficient vector is intercept-first
/// and has length `p + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct BetaMixtureParams<F> {
    pub theta_l: Vec<F>,
    pub theta_r: Vec<F>,
    pub beta_l: Vec<F>,
    pub beta_r: Vec<F>,
    pub gamma_l: F,
    pub gamma_r: F,
}

impl<F: Scalar> BetaMixtureParams<F> {
    pub fn new(theta_l: Vec<F>, theta_r: Vec<F>, beta_l: Vec<F>, beta_r: Vec<F>, gamma_l: F, gamma_r: F) -> Result<Self> {
        let params = Self { theta_l, theta_r, beta_l, beta_r, gamma_l, gamma_r };
        params.validate()?;
        Ok(params)
    }

    /// Symmetric starting point: π_l = π_r = 0.05 and k = 0.5, zero slopes.
    pub fn default_start(p: usize, gammas: (F, F)) -> Result<Self> {
        let mut theta = vec![F::zero(); p + 1];
        theta[0] = F::lit((0.05f64 / 0.9).ln());
        Self::new(theta.clone(), theta, vec![F::zero(); p + 1], vec![F::zero(); p + 1], gammas.0, gammas.1)
    }

    /// Intercept-only model with the given mixing probabilities and shapes.
    pub fn from_intercepts(pi_l: F, pi_r: F, k_l: F, k_r: F, gammas: (F, F)) -> Result<Self> {
        let pi0 = F::one() - pi_l - pi_r;
        if !(pi_l > F::zero() && pi_r > F::zero() && pi0 > F::zero()) {
            return Err(ZapError::Domain("mixing probabilities must be positive and sum below one".into()));
        }
        if !(k_l > F::zero() && k_l < F::one() && k_r > F::zero() && k_r < F::one()) {
            return Err(ZapError::Domain("beta shapes k must lie in (0, 1)".into()));
        }
        let logit = |k: F| (k / (F::one() - k)).ln();
        Self::new(
            vec![(pi_l / pi0).ln()],
            vec![(pi_r / pi0).ln()],
            vec![logit(k_l)],
            vec![logit(k_r)],
            gammas.0,
            gammas.1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.theta_l.len();
        if d == 0 {
            return Err(ZapError::InvalidInput("coefficient vectors need an intercept".into()));
        }
        for v in [&self.theta_r, &self.beta_l, &self.beta_r] {
            if v.len() != d {
                return Err(ZapError::Dimension { expected: d, got: v.len() });
            }
        }
        validate_gamma(self.gamma_l)?;
        validate_gamma(self.gamma_r)?;
        let all = self.theta_l.iter().chain(&self.theta_r).chain(&self.beta_l).chain(&self.beta_r);
        if all.into_iter().any(|c| !c.is_finite()) {
            return Err(ZapError::Domain("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Coefficient vector length `p + 1`.
    pub fn dim(&self) -> usize {
        self.theta_l.len()
    }

    pub fn gammas(&self) -> (F, F) {
        (self.gamma_l, self.gamma_r)
    }

    /// The model with left and right roles exchanged (pairs with `u -> 1 - u`).
    pub fn mirrored(&self) -> Self {
        Self {
            theta_l: self.theta_r.clone(),
            theta_r: self.theta_l.clone(),
            beta_l: self.beta_r.clone(),
            beta_r: self.beta_l.clone(),
            gamma_l: self.gamma_r,
            gamma_r: self.gamma_l,
        }
    }

    pub fn local(&self, x: &[F]) -> Result<LocalMixture<F>> {
        let (pi_l, pi_r) = link_probabilities(self, x)?;
        Ok(LocalMixture { pi_l, pi_r, k_l: link_shape(&self.beta_l, x)?, k_r: link_shape(&self.beta_r, x)? })
    }

    /// Density evaluator at covariate `x`.
    pub fn density_at(&self, x: &[F]) -> Result<LocalDensity<F>> {
        self.check_x(x)?;
        Ok(self.density_unchecked(x))
    }

    pub(crate) fn density_unchecked(&self, x: &[F]) -> LocalDensity<F> {
        let eta_l = predictor(&self.theta_l, x);
        let eta_r = predictor(&self.theta_r, x);
        let k_l = logistic(predictor(&self.beta_l, x));
        let k_r = logistic(predictor(&self.beta_r, x));
        LocalDensity::new(eta_l, eta_r, k_l, k_r, self.gamma_l, self.gamma_r)
    }

    fn check_x(&self, x: &[F]) -> Result<()> {
        if x.len() + 1 != self.dim() {
            return Err(ZapError::Dimension { expected: self.dim() - 1, got: x.len() });
        }
        Ok(())
    }
}

fn validate_gamma<F: Scalar>(g: F) -> Result<()> {
    if !(g > F::lit(2.0)) || !g.is_finite() {
        return Err(ZapError::Domain(format!("shape gamma must exceed 2, got {g}")));
    }
    Ok(())
}

/// `x̃ᵀc` with `x̃ = (1, xᵀ)ᵀ`, clamped to `±PREDICTOR_CLAMP`.
#[inline]
pub(crate) fn predictor<F: Scalar>(coef: &[F], x: &[F]) -> F {
    let mut eta = coef[0];
    for (c, v) in coef[1..].iter().zip(x) {
        eta = eta + *c * *v;
    }
    let lim = F::lit(PREDICTOR_CLAMP);
    eta.max(-lim).min(lim)
}

#[inline]
pub(crate) fn logistic<F: Scalar>(eta: F) -> F {
    F::one() / (F::one() + (-eta).exp())
}

/// Mixing probabilities and beta shapes at a single covariate value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalMixture<F> {
    pub pi_l: F,
    pub pi_r: F,
    pub k_l: F,
    pub k_r: F,
}

/// Log-space evaluator of the working density at one covariate value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalDensity<F> {
    pub log_pi0: F,
    pub log_pi_l: F,
    pub log_pi_r: F,
    pub k_l: F,
    pub k_r: F,
    pub gamma_l: F,
    pub gamma_r: F,
    lnb_l: F,
    lnb_r: F,
}

impl<F: Scalar> LocalDensity<F> {
    pub(crate) fn new(eta_l: F, eta_r: F, k_l: F, k_r: F, gamma_l: F, gamma_r: F) -> Self {
        let lse = log_add_exp(log_add_exp(F::zero(), eta_l), eta_r);
        Self {
            log_pi0: -lse,
            log_pi_l: eta_l - lse,
            log_pi_r: eta_r - lse,
            k_l,
            k_r,
            gamma_l,
            gamma_r,
            lnb_l: F::lit(BetaShapeKernel::new(gamma_l.as_f64()).ln_beta(k_l.as_f64())),
            lnb_r: F::lit(BetaShapeKernel::new(gamma_r.as_f64()).ln_beta(k_r.as_f64())),
        }
    }

    pub fn mixture(&self) -> LocalMixture<F> {
        LocalMixture { pi_l: self.log_pi_l.exp(), pi_r: self.log_pi_r.exp(), k_l: self.k_l, k_r: self.k_r }
    }

    pub fn pi0(&self) -> F {
        self.log_pi0.exp()
    }

    /// `log h_l(u)` given `ln u` and `ln(1 - u)`.
    #[inline]
    pub fn log_h_l(&self, lu: F, l1u: F) -> F {
        (self.k_l - F::one()) * lu + (self.gamma_l - F::one()) * l1u - self.lnb_l
    }

    #[inline]
    pub fn log_h_r(&self, lu: F, l1u: F) -> F {
        (self.gamma_r - F::one()) * lu + (self.k_r - F::one()) * l1u - self.lnb_r
    }

    /// `log h_x(u)` and the two weighted component logs `log π h`.
    #[inline]
    pub fn log_parts(&self, lu: F, l1u: F) -> (F, F, F) {
        let a = self.log_pi_l + self.log_h_l(lu, l1u);
        let b = self.log_pi_r + self.log_h_r(lu, l1u);
        (log_add_exp(log_add_exp(self.log_pi0, a), b), a, b)
    }

    #[inline]
    pub fn log_density_logs(&self, lu: F, l1u: F) -> F {
        self.log_parts(lu, l1u).0
    }

    #[inline]
    pub fn log_density(&self, u: F) -> F {
        let (lu, l1u) = log_pair(u);
        self.log_density_logs(lu, l1u)
    }

    #[inline]
    pub fn assessor_logs(&self, lu: F, l1u: F) -> F {
        (self.log_pi0 - self.log_density_logs(lu, l1u)).exp()
    }

    #[inline]
    pub fn assessor(&self, u: F) -> F {
        let (lu, l1u) = log_pair(u);
        self.assessor_logs(lu, l1u)
    }
}

/// `(ln u, ln(1 - u))`.
#[inline]
pub(crate) fn log_pair<F: Scalar>(u: F) -> (F, F) {
    (u.ln(), (-u).ln_1p())
}

/// `(π_l, π_r)` at covariate `x`.
pub fn link_probabilities<F: Scalar>(params: &BetaMixtureParams<F>, x: &[F]) -> Result<(F, F)> {
    params.check_x(x)?;
    let eta_l = predictor(&params.theta_l, x);
    let eta_r = predictor(&params.theta_r, x);
    let lse = log_add_exp(log_add_exp(F::zero(), eta_l), eta_r);
    Ok(((eta_l - lse).exp(), (eta_r - lse).exp()))
}

/// Logistic shape `k = 1 / (1 + exp(-x̃ᵀβ))`.
pub fn link_shape<F: Scalar>(beta: &[F], x: &[F]) -> Result<F> {
    if beta.len() != x.len() + 1 {
        return Err(ZapError::Dimension { expected: beta.len().saturating_sub(1), got: x.len() });
    }
    Ok(logistic(predictor(beta, x)))
}

/// Density of one beta component: left `Beta(k, γ)`, right `Beta(γ, k)`.
pub fn beta_component_density<F: Scalar>(u: UnitInterval<F>, k: F, gamma: F, side: Side) -> Result<F> {
    if !(k > F::zero() && k < F::one()) {
        return Err(ZapError::Domain(format!("shape k must lie in (0, 1), got {k}")));
    }
    validate_gamma(gamma)?;
    let (lu, l1u) = log_pair(u.get());
    let (kf, gf) = (k.as_f64(), gamma.as_f64());
    let log = match side {
        Side::Left => (k - F::one()) * lu + (gamma - F::one()) * l1u - F::lit(ln_beta_f64(kf, gf)),
        Side::Right => (gamma - F::one()) * lu + (k - F::one()) * l1u - F::lit(ln_beta_f64(gf, kf)),
    };
    Ok(log.exp())
}

/// The working density `h_x(u)`.
pub fn working_density<F: Scalar>(u: UnitInterval<F>, params: &BetaMixtureParams<F>, x: &[F]) -> Result<F> {
    Ok(params.density_at(x)?.log_density(u.get()).exp())
}

/// The assessor `a_x(u) = (1 - π_l - π_r) / h_x(u)`.
pub fn assessor_eval<F: Scalar>(u: UnitInterval<F>, params: &BetaMixtureParams<F>, x: &[F]) -> Result<F> {
    let dens = params.density_at(x)?;
    if !(dens.pi0() > F::zero()) {
        return Err(ZapError::Degenerate("null weight is zero".into()));
    }
    Ok(dens.assessor(u.get()))
}

/// `U = Φ(z)`, clamped onto the open unit interval.
pub fn u_transform<F: Scalar>(z: F) -> Result<UnitInterval<F>> {
    if z.is_nan() {
        return Err(ZapError::Domain("NaN z-value".into()));
    }
    UnitInterval::clamped(normal_cdf(z))
}
