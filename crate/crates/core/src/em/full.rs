//! EM on fully observed u-values.

use serde::{Deserialize, Serialize};

use super::{e_step, loglik, m_step, run_em, Design, EmConfig, EmFitReport, MStepOutcome, MaskedSufficientStats, ObsLogs};
use crate::error::{Result, ZapError};
use crate::model::{log_pair, BetaMixtureParams, TestingInput};
use crate::scalar::Scalar;

/// Posterior probabilities of the left and right components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct PosteriorWeights<F> {
    pub w_l: Vec<F>,
    pub w_r: Vec<F>,
}

pub(crate) fn full_design<F: Scalar>(data: &TestingInput<F>) -> Design<'_, F> {
    Design {
        obs: data.u_values().iter().map(|&u| ObsLogs::single(u)).collect(),
        x: data.covariates(),
        p: data.p(),
    }
}

pub fn e_step_full<F: Scalar>(params: &BetaMixtureParams<F>, data: &TestingInput<F>) -> Result<PosteriorWeights<F>> {
    let stats = e_step(params, &full_design(data))?.stats;
    Ok(PosteriorWeights { w_l: stats.h_l_hat, w_r: stats.h_r_hat })
}

/// One M-step from posterior weights, starting at `warm_start`.
pub fn m_step_full<F: Scalar>(
    weights: &PosteriorWeights<F>,
    data: &TestingInput<F>,
    gammas: (F, F),
    warm_start: &BetaMixtureParams<F>,
    config: &EmConfig,
) -> Result<MStepOutcome<F>> {
    let m = data.m();
    if weights.w_l.len() != m || weights.w_r.len() != m {
        return Err(ZapError::Dimension { expected: m, got: weights.w_l.len().min(weights.w_r.len()) });
    }
    let mut warm = warm_start.clone();
    warm.gamma_l = gammas.0;
    warm.gamma_r = gammas.1;
    warm.validate()?;
    let mut stats = MaskedSufficientStats {
        h_l_hat: weights.w_l.clone(),
        h_r_hat: weights.w_r.clone(),
        e_logu_l: Vec::with_capacity(m),
        e_log1mu_l: Vec::with_capacity(m),
        e_logu_r: Vec::with_capacity(m),
        e_log1mu_r: Vec::with_capacity(m),
    };
    for i in 0..m {
        let (lu, l1u) = log_pair(data.u(i));
        stats.e_logu_l.push(weights.w_l[i] * lu);
        stats.e_log1mu_l.push(weights.w_l[i] * l1u);
        stats.e_logu_r.push(weights.w_r[i] * lu);
        stats.e_log1mu_r.push(weights.w_r[i] * l1u);
    }
    Ok(m_step(&stats, data.covariates(), data.p(), &warm, config))
}

/// Fits from the symmetric default start.
pub fn fit_full_em<F: Scalar>(data: &TestingInput<F>, gammas: (F, F), config: &EmConfig) -> Result<EmFitReport<F>> {
    let init = BetaMixtureParams::default_start(data.p(), gammas)?;
    fit_full_em_from(data, init, config)
}

pub fn fit_full_em_from<F: Scalar>(
    data: &TestingInput<F>,
    init: BetaMixtureParams<F>,
    config: &EmConfig,
) -> Result<EmFitReport<F>> {
    run_em(&full_design(data), init, config)
}

/// `Σ log h_{X_i}(U_i)`.
pub fn full_loglik<F: Scalar>(params: &BetaMixtureParams<F>, data: &TestingInput<F>) -> Result<F> {
    loglik(params, &full_design(data))
}
