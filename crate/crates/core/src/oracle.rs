//! Oracle procedures under a known generative model: exact conditional
//! local false discovery rates, the rank-based optimal threshold and the
//! closed-form rejection boundaries of the two-sided example.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZapError};
use crate::model::TestingInput;
use crate::numeric::normal_quantile_f64;
use crate::rejection::RejectionResult;
use crate::scalar::log_add_exp;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Generative model `Z | X = x ~ (1 - w_l - w_r) φ(z) + w_l N(μ_l, σ²) + w_r N(μ_r, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum OracleModel {
    /// `(8 - x)/10 φ(z) + (x + 2)/10 φ(z - 1.5)`, `x ∈ (-1, 1)`.
    Example21,
    /// `0.8 φ(z) + (1 - x)/10 φ(z + 1.5) + (1 + x)/10 φ(z - 1.5)`.
    Example22,
    /// `0.9 φ(z) + 0.1 φ(z - 1.5 sgn(x))`.
    Example23,
    /// Right-sided alternatives whose weight and mean grow with `x₁ + x₂`.
    Setup1 { eps: f64, eta: f64, zeta: f64, sigma: f64 },
    /// Fixed means `±ε`; the covariate tilts mass between the two sides.
    Setup2 { eps: f64, eta: f64, zeta: f64, sigma: f64 },
    /// Fixed weights; the covariate moves the alternative means.
    Setup3 { eps: f64, eta: f64, zeta: f64, sigma: f64 },
    /// Covariate-free two-sided mixture with total weight `w`, a fraction
    /// `rho` of it on the right.
    TwoSided { w: f64, rho: f64, mu_l: f64, mu_r: f64 },
    /// Every hypothesis null; `p` uninformative covariates.
    GlobalNull { p: usize },
}

/// The mixture at one covariate value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalMixture {
    pub w_l: f64,
    pub mu_l: f64,
    pub w_r: f64,
    pub mu_r: f64,
    pub sigma: f64,
}

impl NormalMixture {
    pub fn null_weight(&self) -> f64 {
        1.0 - self.w_l - self.w_r
    }

    fn log_normal(z: f64, mu: f64, sigma: f64) -> f64 {
        let d = (z - mu) / sigma;
        -0.5 * d * d - LN_SQRT_2PI - sigma.ln()
    }

    /// `(log of null part, log of alternative part)` of the density at `z`.
    pub fn log_parts(&self, z: f64) -> (f64, f64) {
        let null = self.null_weight().ln() + Self::log_normal(z, 0.0, 1.0);
        let left = self.w_l.ln() + Self::log_normal(z, self.mu_l, self.sigma);
        let right = self.w_r.ln() + Self::log_normal(z, self.mu_r, self.sigma);
        (null, log_add_exp(left, right))
    }

    pub fn density(&self, z: f64) -> f64 {
        let (a, b) = self.log_parts(z);
        log_add_exp(a, b).exp()
    }

    /// `P(H = 0 | Z = z)`.
    pub fn clfdr_z(&self, z: f64) -> f64 {
        let (null, alt) = self.log_parts(z);
        (null - log_add_exp(null, alt)).exp()
    }

    /// `P(H = 0 | |Z| = t)`, the posterior given the two-sided p-value.
    pub fn clfdr_abs(&self, t: f64) -> f64 {
        let (n1, a1) = self.log_parts(t);
        let (n2, a2) = self.log_parts(-t);
        let null = log_add_exp(n1, n2);
        (null - log_add_exp(null, log_add_exp(a1, a2))).exp()
    }
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl OracleModel {
    /// Number of covariates the model reads.
    pub fn covariate_dim(&self) -> usize {
        match self {
            OracleModel::Example21 | OracleModel::Example22 | OracleModel::Example23 => 1,
            OracleModel::Setup1 { .. } | OracleModel::Setup2 { .. } | OracleModel::Setup3 { .. } => 2,
            OracleModel::TwoSided { .. } => 0,
            OracleModel::GlobalNull { p } => *p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ZapError::Domain(msg));
        match *self {
            OracleModel::Setup1 { sigma, .. } | OracleModel::Setup2 { sigma, .. } | OracleModel::Setup3 { sigma, .. }
                if !(sigma > 0.0 && sigma.is_finite()) =>
            {
                bad(format!("sigma must be positive, got {sigma}"))
            }
            OracleModel::TwoSided { w, rho, .. } if !((0.0..1.0).contains(&w) && (0.0..=1.0).contains(&rho)) => {
                bad(format!("need w in [0, 1) and rho in [0, 1], got {w} and {rho}"))
            }
            _ => Ok(()),
        }
    }

    /// Mixture weights and means at covariate `x`.
    pub fn mixture_at(&self, x: &[f64]) -> Result<NormalMixture> {
        if x.len() != self.covariate_dim() {
            return Err(ZapError::Dimension { expected: self.covariate_dim(), got: x.len() });
        }
        let none = NormalMixture { w_l: 0.0, mu_l: 0.0, w_r: 0.0, mu_r: 0.0, sigma: 1.0 };
        let mix = match *self {
            OracleModel::Example21 => NormalMixture { w_r: (x[0] + 2.0) / 10.0, mu_r: 1.5, ..none },
            OracleModel::Example22 => {
                NormalMixture { w_l: (1.0 - x[0]) / 10.0, mu_l: -1.5, w_r: (1.0 + x[0]) / 10.0, mu_r: 1.5, sigma: 1.0 }
            }
            OracleModel::Example23 => {
                if x[0] >= 0.0 {
                    NormalMixture { w_r: 0.1, mu_r: 1.5, ..none }
                } else {
                    NormalMixture { w_l: 0.1, mu_l: -1.5, ..none }
                }
            }
            OracleModel::Setup1 { eps, eta, zeta, sigma } => {
                let xs = x[0] + x[1];
                NormalMixture { w_r: logistic(eta + zeta * xs), mu_r: 2.0 * eps * logistic(zeta * xs), sigma, ..none }
            }
            OracleModel::Setup2 { eps, eta, zeta, sigma } => {
                let xs = x[0] + x[1];
                let denom = (-eta).exp() + (-zeta * xs).exp() + (zeta * xs).exp();
                NormalMixture {
                    w_l: (-zeta * xs).exp() / denom,
                    mu_l: -eps,
                    w_r: (zeta * xs).exp() / denom,
                    mu_r: eps,
                    sigma,
                }
            }
            OracleModel::Setup3 { eps, eta, zeta, sigma } => {
                let xs = x[0] + x[1];
                let w = 0.5 * logistic(eta);
                NormalMixture {
                    w_l: w,
                    mu_l: -2.0 * eps * logistic(-zeta * xs),
                    w_r: w,
                    mu_r: 2.0 * eps * logistic(zeta * xs),
                    sigma,
                }
            }
            OracleModel::TwoSided { w, rho, mu_l, mu_r } => {
                NormalMixture { w_l: w * (1.0 - rho), mu_l, w_r: w * rho, mu_r, sigma: 1.0 }
            }
            OracleModel::GlobalNull { .. } => none,
        };
        Ok(mix)
    }
}

/// Scale of the main statistic the oracle conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    /// `P(H = 0 | Z, X)`.
    ZScale,
    /// `P(H = 0 | P, X)` with `P = 2Φ(-|Z|)`.
    PScale,
}

/// Exact CLfdr. `value` is a z-value on the z-scale and a two-sided
/// p-value in `(0, 1]` on the p-scale.
pub fn clfdr_true(model: &OracleModel, value: f64, x: &[f64], mode: OracleMode) -> Result<f64> {
    let mix = model.mixture_at(x)?;
    match mode {
        OracleMode::ZScale => {
            if value.is_nan() {
                return Err(ZapError::Domain("z-value is NaN".into()));
            }
            Ok(mix.clfdr_z(value))
        }
        OracleMode::PScale => {
            if !(value > 0.0 && value <= 1.0) {
                return Err(ZapError::Domain(format!("p-value must lie in (0, 1], got {value}")));
            }
            Ok(mix.clfdr_abs(-normal_quantile_f64(value / 2.0)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleThreshold {
    /// Number of rejections; 0 when even the smallest value exceeds α.
    pub j: usize,
    /// `L_(j)`.
    pub threshold_value: Option<f64>,
    /// Mean of the `j` smallest values.
    pub conditional_fdr: f64,
}

/// Rejects the `j` smallest values, `j` the largest prefix whose running
/// mean is at most α. Ties with `L_(j)` beyond the prefix stay accepted
/// (lower index first), which keeps the conditional FDR at most α.
pub fn oracle_threshold(clfdr_values: &[f64], alpha: f64) -> Result<(OracleThreshold, Vec<usize>)> {
    if let Some(i) = clfdr_values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(ZapError::Domain(format!("CLfdr value {} at {i} is outside [0, 1]", clfdr_values[i])));
    }
    let mut order: Vec<usize> = (0..clfdr_values.len()).collect();
    order.sort_by(|&a, &b| clfdr_values[a].total_cmp(&clfdr_values[b]).then(a.cmp(&b)));
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    let mut best = (0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        // Neumaier summation keeps long prefixes exact enough for the comparison.
        let v = clfdr_values[i];
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
        let mean = (sum + comp) / (k + 1) as f64;
        if mean <= alpha {
            best = (k + 1, mean);
        }
    }
    let (j, mean) = best;
    let mut rejected: Vec<usize> = order[..j].to_vec();
    rejected.sort_unstable();
    let threshold = OracleThreshold {
        j,
        threshold_value: (j > 0).then(|| clfdr_values[order[j - 1]]),
        conditional_fdr: mean,
    };
    Ok((threshold, rejected))
}

/// Oracle procedure on data generated from `model`.
pub fn run_oracle(
    model: &OracleModel,
    data: &TestingInput<f64>,
    alpha: f64,
    mode: OracleMode,
) -> Result<RejectionResult<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ZapError::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = data.z_values().ok_or_else(|| ZapError::InvalidInput("the oracle needs z-values".into()))?;
    let stats = (0..data.m())
        .map(|i| {
            let mix = model.mixture_at(data.x(i))?;
            Ok(match mode {
                OracleMode::ZScale => mix.clfdr_z(z[i]),
                OracleMode::PScale => mix.clfdr_abs(z[i].abs()),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let (th, rejected) = oracle_threshold(&stats, alpha)?;
    Ok(RejectionResult {
        rejected,
        threshold: th.threshold_value,
        fdp_estimate: if th.j > 0 { th.conditional_fdr } else { f64::INFINITY },
        stats,
    })
}

const EX22_MU: f64 = 1.5;

/// The two z-values at which the likelihood ratio of the two-sided example
/// equals `(1 - λ*) / λ*`, lower first.
pub fn rejection_boundary_ex22(x: f64, lambda_star: f64) -> Result<(f64, f64)> {
    if !(x > -1.0 && x < 1.0) || !(lambda_star > 0.0 && lambda_star < 1.0) {
        return Err(ZapError::Domain(format!("need x in (-1, 1) and lambda in (0, 1), got {x} and {lambda_star}")));
    }
    let mu = EX22_MU;
    let odds = (1.0 - lambda_star) / lambda_star;
    let a = 4.0 * odds * (mu * mu / 2.0).exp();
    let disc = 16.0 * odds * odds * (mu * mu).exp() - (1.0 - x) * (1.0 + x);
    if !(disc > 0.0) {
        return Err(ZapError::Domain(format!("no boundary: discriminant {disc} is not positive")));
    }
    let root = disc.sqrt();
    let lo_arg = (a - root) / (1.0 + x);
    let hi_arg = (a + root) / (1.0 + x);
    if !(lo_arg > 0.0) {
        return Err(ZapError::Domain(format!("non-positive logarithm argument {lo_arg}")));
    }
    Ok((lo_arg.ln() / mu, hi_arg.ln() / mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn phi(z: f64) -> f64 {
        (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn clfdr_examples() {
        let v = clfdr_true(&OracleModel::Example22, 0.0, &[0.0], OracleMode::ZScale).unwrap();
        let expect = 0.8 * phi(0.0) / (0.8 * phi(0.0) + 0.2 * phi(1.5));
        assert!((v - expect).abs() < 1e-14);
        assert!((v - 0.9249).abs() < 5e-5);
        let null = OracleModel::GlobalNull { p: 1 };
        for z in [-5.0, 0.0, 3.0, 40.0] {
            assert_eq!(clfdr_true(&null, z, &[0.3], OracleMode::ZScale).unwrap(), 1.0);
        }
        assert!(clfdr_true(&OracleModel::Example22, 0.0, &[0.0], OracleMode::PScale).is_err());
        assert!(clfdr_true(&OracleModel::Example22, 1.5, &[0.0], OracleMode::PScale).is_err());
        assert!(clfdr_true(&OracleModel::Example22, 0.5, &[0.0, 1.0], OracleMode::PScale).is_err());
    }

    #[test]
    fn p_scale_matches_transformed_density() {
        for model in [OracleModel::Example22, OracleModel::Example23] {
            for p in [1e-6, 0.001, 0.05, 0.3, 1.0] {
                let t = -normal_quantile_f64(p / 2.0);
                let g1 = (phi(-t - 1.5) + phi(t - 1.5)) / (2.0 * phi(t));
                let w = if model == OracleModel::Example22 { 0.2 } else { 0.1 };
                let expect = (1.0 - w) / ((1.0 - w) + w * g1);
                for x in [-0.9, -0.2, 0.0, 0.5, 0.99] {
                    let v = clfdr_true(&model, p, &[x], OracleMode::PScale).unwrap();
                    assert!((v - expect).abs() < 1e-12, "{model:?} p={p} x={x}");
                }
            }
        }
    }

    #[test]
    fn no_covariate_effect_means_z_alone_matters() {
        let model = OracleModel::Setup2 { eps: 2.0, eta: -2.5, zeta: 0.0, sigma: 1.0 };
        for z in [-3.0, -1.0, 0.5, 2.5] {
            let a = clfdr_true(&model, z, &[0.3, -1.2], OracleMode::ZScale).unwrap();
            let b = clfdr_true(&model, z, &[-2.0, 0.7], OracleMode::ZScale).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_examples() {
        let m = OracleModel::Example21.mixture_at(&[1.0]).unwrap();
        assert!((m.w_r - 0.3).abs() < 1e-15);
        let s1 = OracleModel::Setup1 { eps: 1.5, eta: -2.0, zeta: 0.0, sigma: 1.0 };
        let m = s1.mixture_at(&[0.4, 0.9]).unwrap();
        assert!((m.w_r - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-15);
        assert!((m.w_r - 0.1192).abs() < 1e-4);
        let s2 = OracleModel::Setup2 { eps: 2.1, eta: -2.5, zeta: 0.0, sigma: 1.0 };
        let m = s2.mixture_at(&[1.0, 0.0]).unwrap();
        assert!((m.w_l + m.w_r - 2.0 / (2.5f64.exp() + 2.0)).abs() < 1e-15);
        let s3 = OracleModel::Setup3 { eps: 1.7, eta: -2.0, zeta: 3.0, sigma: 1.0 };
        let m = s3.mixture_at(&[0.5, -0.5]).unwrap();
        assert!((m.mu_r - 1.7).abs() < 1e-15 && (m.mu_l + 1.7).abs() < 1e-15);
        let g = OracleModel::TwoSided { w: 0.1, rho: 0.9, mu_l: -2.5, mu_r: 2.5 };
        let m = g.mixture_at(&[]).unwrap();
        assert!((m.w_l - 0.01).abs() < 1e-15 && (m.w_r - 0.09).abs() < 1e-15);
        assert!(OracleModel::Example21.mixture_at(&[]).is_err());
    }

    #[test]
    fn mixture_density_integrates_to_one() {
        let model = OracleModel::Setup1 { eps: 2.1, eta: -2.0, zeta: 1.0, sigma: 2.0 };
        let mix = model.mixture_at(&[0.8, 0.3]).unwrap();
        let h = 1e-3;
        let total: f64 = (-20_000..20_000).map(|k| mix.density(k as f64 * h) * h).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn threshold_examples() {
        let (th, rej) = oracle_threshold(&[0.01, 0.02, 0.9], 0.05).unwrap();
        assert_eq!(th.j, 2);
        assert_eq!(rej, vec![0, 1]);
        assert!((th.conditional_fdr - 0.015).abs() < 1e-15);
        assert_eq!(th.threshold_value, Some(0.02));
        let (th, rej) = oracle_threshold(&[0.3, 0.2, 0.9], 0.1).unwrap();
        assert_eq!(th.j, 0);
        assert!(rej.is_empty());
        assert!(oracle_threshold(&[0.3, 1.2], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn threshold_matches_prefix_scan(v in proptest::collection::vec(0.0f64..1.0, 100), alpha in 0.01f64..0.5) {
            let (th, rej) = oracle_threshold(&v, alpha).unwrap();
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut j = 0;
            for k in 1..=sorted.len() {
                let mean: f64 = sorted[..k].iter().sum::<f64>() / k as f64;
                if mean <= alpha {
                    j = k;
                }
            }
            prop_assert_eq!(th.j, j);
            prop_assert_eq!(rej.len(), j);
            let mean: f64 = rej.iter().map(|&i| v[i]).sum::<f64>() / rej.len().max(1) as f64;
            prop_assert!(mean <= alpha + 1e-12);
        }
    }

    fn likelihood_ratio(z: f64, x: f64) -> f64 {
        ((1.0 - x) / 10.0 * phi(z + 1.5) + (1.0 + x) / 10.0 * phi(z - 1.5)) / (0.8 * phi(z))
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let flo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (flo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn boundaries_solve_the_ratio_equation() {
        for &lambda in &[0.05, 0.2, 0.5] {
            let (lo, hi) = rejection_boundary_ex22(0.0, lambda).unwrap();
            let target = (1.0 - lambda) / lambda;
            for z in [lo, hi] {
                assert!((likelihood_ratio(z, 0.0) / target - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn boundaries_match_bisection() {
        // The ratio is convex in exp(1.5 z) with its minimum at the vertex.
        for (k, &x) in [-0.9, -0.5, 0.0, 0.4, 0.8].iter().enumerate() {
            for &lambda in &[0.02, 0.1, 0.3, 0.6] {
                let (lo, hi) = rejection_boundary_ex22(x, lambda).unwrap();
                let target = (1.0 - lambda) / lambda;
                // φ(z ∓ 1.5)/φ(z) = exp(±1.5 z - 1.125) avoids underflow in the tails.
                let f = |z: f64| {
                    let r = ((1.0 - x) * (-1.5 * z).exp() + (1.0 + x) * (1.5 * z).exp()) * (-1.125f64).exp() / 8.0;
                    r.ln() - target.ln()
                };
                let vertex = ((1.0 - x) / (1.0 + x)).ln() / 3.0;
                let b_lo = bisect(f, -40.0, vertex);
                let b_hi = bisect(f, vertex, 40.0);
                assert!((lo - b_lo).abs() < 1e-6, "case {k} lambda {lambda}: {lo} vs {b_lo}");
                assert!((hi - b_hi).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lower_boundary_moves_left_as_x_grows() {
        let grid: Vec<f64> = (-9..=9).map(|k| k as f64 / 10.0).collect();
        let lows: Vec<f64> = grid.iter().map(|&x| rejection_boundary_ex22(x, 0.2).unwrap().0).collect();
        assert!(lows.windows(2).all(|w| w[1] < w[0]));
        assert!(rejection_boundary_ex22(1.0, 0.2).is_err());
        assert!(rejection_boundary_ex22(0.0, 0.0).is_err());
    }
}
