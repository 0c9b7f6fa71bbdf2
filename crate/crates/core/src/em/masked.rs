//! EM on masked data, where candidate hypotheses are only known up to the
//! pair `{U, Ǔ}`.

use serde::{Deserialize, Serialize};

use super::newton::{maximize, NewtonOptions, Quadratic};
use super::{
    add_outer, add_vec, e_step, fit_beta_block, fit_theta_block, loglik, run_em, Design, EmConfig, EmFitReport, MRows,
    MaskedSufficientStats, ObsLogs,
};
use crate::error::{Result, ZapError};
use crate::masking::{reflect_raw, MaskState, MaskedValue};
use crate::model::{logistic, predictor, BetaMixtureParams, TestingInput};
use crate::scalar::{log_add_exp, Scalar};

/// Clamp range for the initial probabilities.
const PROB_FLOOR: f64 = 0.01;
/// Below this unmasked-sliver width the excess-probability correction is skipped.
const MIN_SLIVER: f64 = 0.02;
const LOGISTIC_RIDGE: f64 = 1e-6;

fn masked_design<'a, F: Scalar>(state: &MaskState<F>, data: &'a TestingInput<F>) -> Result<Design<'a, F>> {
    if state.m() != data.m() {
        return Err(ZapError::Dimension { expected: data.m(), got: state.m() });
    }
    let obs = state
        .u_tilde()
        .iter()
        .map(|v| match *v {
            MaskedValue::Single(u) => ObsLogs::single(u),
            MaskedValue::Pair(lo, hi) => ObsLogs::pair(lo, hi),
        })
        .collect();
    Ok(Design { obs, x: data.covariates(), p: data.p() })
}

/// Posterior component probabilities and expected log-statistics given the
/// masked view. Only the pairs and the unmasked u-values are read.
pub fn e_step_masked<F: Scalar>(
    params: &BetaMixtureParams<F>,
    state: &MaskState<F>,
    data: &TestingInput<F>,
) -> Result<MaskedSufficientStats<F>> {
    Ok(e_step(params, &masked_design(state, data)?)?.stats)
}

/// `Σ_unmasked log h(U_i) + Σ_masked log(h(U_i) + h(Ǔ_i))`.
pub fn masked_loglik<F: Scalar>(params: &BetaMixtureParams<F>, state: &MaskState<F>, data: &TestingInput<F>) -> Result<F> {
    loglik(params, &masked_design(state, data)?)
}

/// Auxiliary logistic regression summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct AuxLogistic<F> {
    pub coefficients: Vec<F>,
    /// True when the covariate fit was degenerate and the intercept-only
    /// estimate was used instead.
    pub intercept_only_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct MaskedInitState<F> {
    pub params0: BetaMixtureParams<F>,
    /// `P(U > 0.5 | X)`.
    pub side_model: AuxLogistic<F>,
    /// Singleton indicator regressed on `X` within the right group.
    pub singleton_right: AuxLogistic<F>,
    pub singleton_left: AuxLogistic<F>,
    /// Initial mixing probabilities before conversion to θ.
    pub pi_l0: Vec<F>,
    pub pi_r0: Vec<F>,
}

/// Conservative share of right-leaning alternatives among right-group
/// hypotheses, from the probability `pi_j` of being unmasked and the width
/// of the unmasked sliver `0.5 - 2(1 - s_r)`.
pub fn right_excess_probability<F: Scalar>(pi_j: F, s_r: F) -> F {
    excess_probability(pi_j, F::lit(0.5) - F::lit(2.0) * (F::one() - s_r))
}

/// Left-side counterpart with sliver width `0.5 - 2 s_l`.
pub fn left_excess_probability<F: Scalar>(pi_j: F, s_l: F) -> F {
    excess_probability(pi_j, F::lit(0.5) - F::lit(2.0) * s_l)
}

fn excess_probability<F: Scalar>(pi_j: F, width: F) -> F {
    if width <= F::lit(MIN_SLIVER) {
        return F::one() - pi_j;
    }
    (F::one() - pi_j) + pi_j * (F::one() - F::lit(0.5) / width)
}

fn clamp_prob<F: Scalar>(p: F) -> F {
    p.max(F::lit(PROB_FLOOR)).min(F::lit(1.0 - PROB_FLOOR))
}

fn logistic_objective<F: Scalar>(x: &[F], p: usize, y: &[F], b: &[F], derivs: bool) -> Quadratic<F> {
    let d = p + 1;
    let lambda = F::lit(LOGISTIC_RIDGE);
    let mut value = F::zero();
    let mut grad = vec![F::zero(); if derivs { d } else { 0 }];
    let mut neg_hess = vec![F::zero(); if derivs { d * d } else { 0 }];
    for (i, &yi) in y.iter().enumerate() {
        let row = &x[i * p..(i + 1) * p];
        let eta = predictor(b, row);
        value = value + yi * eta - log_add_exp(F::zero(), eta);
        if derivs {
            let s = logistic(eta);
            add_vec(&mut grad, 0, row, yi - s);
            add_outer(&mut neg_hess, d, 0, 0, row, s * (F::one() - s));
        }
    }
    for j in 0..d {
        value = value - F::lit(0.5) * lambda * b[j] * b[j];
        if derivs {
            grad[j] = grad[j] - lambda * b[j];
            neg_hess[j * d + j] = neg_hess[j * d + j] + lambda;
        }
    }
    Quadratic { value, grad, neg_hess, fallback: None }
}

/// Ridge-penalised logistic regression of `y` on the rows `x`.
fn fit_logistic<F: Scalar>(x: &[F], p: usize, y: &[F], cfg: &EmConfig) -> AuxLogistic<F> {
    let d = p + 1;
    let n = y.len();
    let mean = if n == 0 { F::zero() } else { y.iter().fold(F::zero(), |s, v| s + *v) / F::from_usize_lossy(n) };
    let bound = F::lit(cfg.coef_bound);
    let intercept_only = || {
        let eps = F::lit(1e-6);
        let q = mean.max(eps).min(F::one() - eps);
        let mut c = vec![F::zero(); d];
        c[0] = (q / (F::one() - q)).ln();
        c
    };
    if n == 0 {
        return AuxLogistic { coefficients: intercept_only(), intercept_only_fallback: true };
    }
    let opts = NewtonOptions { max_iter: cfg.inner_iter.max(50), bound };
    let out = maximize(
        &vec![F::zero(); d],
        &opts,
        |b| logistic_objective(x, p, y, b, true),
        |b| logistic_objective(x, p, y, b, false).value,
    );
    let separated = out.x.iter().any(|c| c.abs() >= bound * F::lit(0.999));
    if !out.converged || separated {
        return AuxLogistic { coefficients: intercept_only(), intercept_only_fallback: true };
    }
    AuxLogistic { coefficients: out.x, intercept_only_fallback: false }
}

fn subset_rows<F: Scalar>(data: &TestingInput<F>, idx: &[usize]) -> Vec<F> {
    idx.iter().flat_map(|&i| data.x(i).iter().copied()).collect()
}

/// Visible `(lo, hi)` of a hypothesis: the pair, or the point and its reflection.
fn visible_pair<F: Scalar>(v: &MaskedValue<F>) -> (F, F) {
    match *v {
        MaskedValue::Single(u) => {
            let r = reflect_raw(u);
            (u.min(r), u.max(r))
        }
        MaskedValue::Pair(lo, hi) => (lo, hi),
    }
}

/// Data-driven starting point for the masked EM.
pub fn initialize_masked<F: Scalar>(
    state: &MaskState<F>,
    data: &TestingInput<F>,
    gammas: (F, F),
) -> Result<MaskedInitState<F>> {
    initialize_masked_with(state, data, gammas, &EmConfig::default())
}

pub(crate) fn initialize_masked_with<F: Scalar>(
    state: &MaskState<F>,
    data: &TestingInput<F>,
    gammas: (F, F),
    cfg: &EmConfig,
) -> Result<MaskedInitState<F>> {
    let m = data.m();
    if state.m() != m {
        return Err(ZapError::Dimension { expected: m, got: state.m() });
    }
    let p = data.p();
    let d = p + 1;
    let pairs: Vec<(F, F)> = state.u_tilde().iter().map(visible_pair).collect();
    let right: Vec<bool> = pairs.iter().map(|&(lo, _)| lo > F::lit(0.5)).collect();
    let left_idx: Vec<usize> = (0..m).filter(|&i| !right[i]).collect();
    let right_idx: Vec<usize> = (0..m).filter(|&i| right[i]).collect();

    // Beta shapes from the outer pair elements of each group.
    let shape_fit = |idx: &[usize], gamma: F, stat: &dyn Fn(usize) -> F| -> Vec<F> {
        let zero = vec![F::zero(); d];
        if idx.is_empty() {
            return zero;
        }
        let (xs, w, s) = if p == 0 {
            let total = idx.iter().fold(F::zero(), |acc, &i| acc + stat(i));
            (Vec::new(), vec![F::from_usize_lossy(idx.len())], vec![total])
        } else {
            (subset_rows(data, idx), vec![F::one(); idx.len()], idx.iter().map(|&i| stat(i)).collect())
        };
        fit_beta_block(&xs, p, &w, &s, gamma, &zero, cfg).0
    };
    let beta_l = shape_fit(&left_idx, gammas.0, &|i| pairs[i].0.ln());
    let beta_r = shape_fit(&right_idx, gammas.1, &|i| (-pairs[i].1).ln_1p());

    let side_y: Vec<F> = right.iter().map(|&r| if r { F::one() } else { F::zero() }).collect();
    let side_model = fit_logistic(data.covariates(), p, &side_y, cfg);
    let singleton = |idx: &[usize]| {
        let y: Vec<F> = idx.iter().map(|&i| if state.u_tilde()[i].is_pair() { F::zero() } else { F::one() }).collect();
        fit_logistic(&subset_rows(data, idx), p, &y, cfg)
    };
    let singleton_right = singleton(&right_idx);
    let singleton_left = singleton(&left_idx);

    let th = state.thresholds();
    let mut pi_l0 = Vec::with_capacity(m);
    let mut pi_r0 = Vec::with_capacity(m);
    for i in 0..m {
        let x = data.x(i);
        let plus = clamp_prob(logistic(predictor(&side_model.coefficients, x)));
        let minus = clamp_prob(F::one() - plus);
        let j_r = logistic(predictor(&singleton_right.coefficients, x));
        let j_l = logistic(predictor(&singleton_left.coefficients, x));
        let r_plus = clamp_prob(right_excess_probability(j_r, th.s_r[i]));
        let l_minus = clamp_prob(left_excess_probability(j_l, th.s_l[i]));
        pi_r0.push(clamp_prob(r_plus * plus));
        pi_l0.push(clamp_prob(l_minus * minus));
    }

    // θ from the soft labels.
    let theta = {
        let stats = MaskedSufficientStats {
            h_l_hat: pi_l0.clone(),
            h_r_hat: pi_r0.clone(),
            e_logu_l: vec![F::zero(); m],
            e_log1mu_l: vec![F::zero(); m],
            e_logu_r: vec![F::zero(); m],
            e_log1mu_r: vec![F::zero(); m],
        };
        let rows = MRows::new(&stats, data.covariates(), p);
        fit_theta_block(&rows, &vec![F::zero(); 2 * d], cfg).0
    };
    let params0 = BetaMixtureParams::new(theta[..d].to_vec(), theta[d..].to_vec(), beta_l, beta_r, gammas.0, gammas.1)?;
    Ok(MaskedInitState { params0, side_model, singleton_right, singleton_left, pi_l0, pi_r0 })
}

/// Fits from the data-driven initialisation.
pub fn fit_masked_em<F: Scalar>(
    state: &MaskState<F>,
    data: &TestingInput<F>,
    gammas: (F, F),
    config: &EmConfig,
) -> Result<EmFitReport<F>> {
    config.validate()?;
    let init = initialize_masked_with(state, data, gammas, config)?.params0;
    fit_masked_em_from(state, data, init, config)
}

pub fn fit_masked_em_from<F: Scalar>(
    state: &MaskState<F>,
    data: &TestingInput<F>,
    init: BetaMixtureParams<F>,
    config: &EmConfig,
) -> Result<EmFitReport<F>> {
    run_em(&masked_design(state, data)?, init, config)
}
