//! EM fitting of the beta-mixture working model, on fully observed u-values
//! ([`full`]) or on masked data ([`masked`]).
//!
//! Both variants share one E-step kernel and one blockwise Newton M-step:
//! the mixing coefficients θ form a soft-label multinomial logistic
//! problem and each beta shape block a weighted beta likelihood.

pub mod full;
pub mod masked;
pub(crate) mod newton;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZapError};
use crate::model::{log_pair, predictor, BetaMixtureParams, LocalDensity};
use crate::numeric::BetaShapeKernel;
use crate::scalar::{compensated_sum, log_add_exp, Scalar};
use newton::{maximize, NewtonOptions, Quadratic};

pub use full::{e_step_full, fit_full_em, fit_full_em_from, full_loglik, m_step_full, PosteriorWeights};
pub use masked::{
    e_step_masked, fit_masked_em, fit_masked_em_from, initialize_masked, masked_loglik, MaskedInitState,
};

/// Smallest data set the fitting routines accept.
pub const MIN_HYPOTHESES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Relative change in observed log-likelihood that stops the outer loop.
    pub tol: f64,
    pub max_iter: usize,
    /// Newton iterations per M-step block.
    pub inner_iter: usize,
    /// Every coefficient is kept in `[-coef_bound, coef_bound]`.
    pub coef_bound: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200, inner_iter: 25, coef_bound: 20.0 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || self.inner_iter == 0 || !(self.coef_bound > 0.0) {
            return Err(ZapError::InvalidInput(format!("invalid EM configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct EmFitReport<F> {
    pub params: BetaMixtureParams<F>,
    /// Observed-data log-likelihood at the start and after every cycle.
    pub loglik_trace: Vec<F>,
    pub iterations: usize,
    pub converged: bool,
}

/// Expected complete-data sufficient statistics per hypothesis.
///
/// `h_*_hat` are the posterior component probabilities and the `e_*`
/// fields the posterior expectations of `H log U` and `H log(1 - U)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct MaskedSufficientStats<F> {
    pub h_l_hat: Vec<F>,
    pub h_r_hat: Vec<F>,
    pub e_logu_l: Vec<F>,
    pub e_log1mu_l: Vec<F>,
    pub e_logu_r: Vec<F>,
    pub e_log1mu_r: Vec<F>,
}

impl<F: Scalar> MaskedSufficientStats<F> {
    pub fn len(&self) -> usize {
        self.h_l_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_l_hat.is_empty()
    }
}

/// Outcome of one M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutcome<F> {
    pub params: BetaMixtureParams<F>,
    /// False when no block could improve on the warm start.
    pub improved: bool,
}

/// Logs of an observation: a point, or a masked pair.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ObsLogs<F> {
    Single(F, F),
    Pair((F, F), (F, F)),
}

impl<F: Scalar> ObsLogs<F> {
    pub(crate) fn single(u: F) -> Self {
        let (a, b) = log_pair(u);
        ObsLogs::Single(a, b)
    }

    pub(crate) fn pair(lo: F, hi: F) -> Self {
        ObsLogs::Pair(log_pair(lo), log_pair(hi))
    }
}

/// Per-point E-step output: `[w_l, w_r, a_l, b_l, a_r, b_r, loglik]`.
type PointStats<F> = [F; 7];

fn point_stats<F: Scalar>(dens: &LocalDensity<F>, obs: &ObsLogs<F>) -> PointStats<F> {
    match *obs {
        ObsLogs::Single(lu, l1u) => {
            let (ll, ll_l, ll_r) = dens.log_parts(lu, l1u);
            let w_l = (ll_l - ll).exp();
            let w_r = (ll_r - ll).exp();
            [w_l, w_r, w_l * lu, w_l * l1u, w_r * lu, w_r * l1u, ll]
        }
        ObsLogs::Pair((lua, l1ua), (lub, l1ub)) => {
            let (la, lla, lra) = dens.log_parts(lua, l1ua);
            let (lb, llb, lrb) = dens.log_parts(lub, l1ub);
            let tot = log_add_exp(la, lb);
            let (pla, plb) = ((lla - tot).exp(), (llb - tot).exp());
            let (pra, prb) = ((lra - tot).exp(), (lrb - tot).exp());
            [
                pla + plb,
                pra + prb,
                pla * lua + plb * lub,
                pla * l1ua + plb * l1ub,
                pra * lua + prb * lub,
                pra * l1ua + prb * l1ub,
                tot,
            ]
        }
    }
}

/// Observations with their covariate rows (row-major, `p` columns).
pub(crate) struct Design<'a, F> {
    pub obs: Vec<ObsLogs<F>>,
    pub x: &'a [F],
    pub p: usize,
}

impl<F: Scalar> Design<'_, F> {
    fn m(&self) -> usize {
        self.obs.len()
    }

    fn row(&self, i: usize) -> &[F] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
}

const PAR_MIN_LEN: usize = 256;

pub(crate) struct EStep<F> {
    pub stats: MaskedSufficientStats<F>,
    pub loglik: F,
}

pub(crate) fn e_step<F: Scalar>(params: &BetaMixtureParams<F>, design: &Design<'_, F>) -> Result<EStep<F>> {
    if params.dim() != design.p + 1 {
        return Err(ZapError::Dimension { expected: design.p + 1, got: params.dim() });
    }
    let shared = (design.p == 0).then(|| params.density_unchecked(&[]));
    let per_point: Vec<PointStats<F>> = (0..design.m())
        .into_par_iter()
        .with_min_len(PAR_MIN_LEN)
        .map(|i| match &shared {
            Some(d) => point_stats(d, &design.obs[i]),
            None => point_stats(&params.density_unchecked(design.row(i)), &design.obs[i]),
        })
        .collect();
    if let Some(i) = per_point.iter().position(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(ZapError::NonFinite { index: i, what: "log-likelihood" });
    }
    let loglik = compensated_sum(per_point.iter().map(|s| s[6]));
    let col = |k: usize| per_point.iter().map(|s| s[k]).collect::<Vec<F>>();
    Ok(EStep {
        stats: MaskedSufficientStats {
            h_l_hat: col(0),
            h_r_hat: col(1),
            e_logu_l: col(2),
            e_log1mu_l: col(3),
            e_logu_r: col(4),
            e_log1mu_r: col(5),
        },
        loglik,
    })
}

/// Observed-data log-likelihood.
pub(crate) fn loglik<F: Scalar>(params: &BetaMixtureParams<F>, design: &Design<'_, F>) -> Result<F> {
    Ok(e_step(params, design)?.loglik)
}

/// Rows entering the M-step; for intercept-only designs all hypotheses are
/// collapsed into one row with count `m`.
pub(crate) struct MRows<'a, F> {
    pub x: &'a [F],
    pub p: usize,
    pub count: Vec<F>,
    pub w_l: Vec<F>,
    pub w_r: Vec<F>,
    pub s_l: Vec<F>,
    pub s_r: Vec<F>,
}

impl<'a, F: Scalar> MRows<'a, F> {
    pub(crate) fn new(stats: &MaskedSufficientStats<F>, x: &'a [F], p: usize) -> Self {
        if p == 0 {
            let sum = |v: &[F]| vec![compensated_sum(v.iter().copied())];
            return Self {
                x,
                p,
                count: vec![F::from_usize_lossy(stats.len())],
                w_l: sum(&stats.h_l_hat),
                w_r: sum(&stats.h_r_hat),
                s_l: sum(&stats.e_logu_l),
                s_r: sum(&stats.e_log1mu_r),
            };
        }
        Self {
            x,
            p,
            count: vec![F::one(); stats.len()],
            w_l: stats.h_l_hat.clone(),
            w_r: stats.h_r_hat.clone(),
            s_l: stats.e_logu_l.clone(),
            s_r: stats.e_log1mu_r.clone(),
        }
    }

    fn n(&self) -> usize {
        self.count.len()
    }

    fn row(&self, i: usize) -> &[F] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
}

fn add_outer<F: Scalar>(h: &mut [F], n: usize, off_r: usize, off_c: usize, x: &[F], scale: F) {
    let d = x.len() + 1;
    for a in 0..d {
        let xa = if a == 0 { F::one() } else { x[a - 1] };
        for b in 0..d {
            let xb = if b == 0 { F::one() } else { x[b - 1] };
            h[(off_r + a) * n + off_c + b] = h[(off_r + a) * n + off_c + b] + scale * xa * xb;
        }
    }
}

fn add_vec<F: Scalar>(g: &mut [F], off: usize, x: &[F], scale: F) {
    g[off] = g[off] + scale;
    for (j, v) in x.iter().enumerate() {
        g[off + 1 + j] = g[off + 1 + j] + scale * *v;
    }
}

/// Soft-label multinomial log-likelihood in `θ = (θ_l, θ_r)`.
pub(crate) fn theta_objective<F: Scalar>(rows: &MRows<'_, F>, theta: &[F], derivs: bool) -> Quadratic<F> {
    let d = rows.p + 1;
    let n2 = 2 * d;
    let (tl, tr) = theta.split_at(d);
    let mut terms = Vec::with_capacity(rows.n());
    let mut grad = vec![F::zero(); if derivs { n2 } else { 0 }];
    let mut neg_hess = vec![F::zero(); if derivs { n2 * n2 } else { 0 }];
    for i in 0..rows.n() {
        let x = rows.row(i);
        let (el, er) = (predictor(tl, x), predictor(tr, x));
        let lse = log_add_exp(log_add_exp(F::zero(), el), er);
        let c = rows.count[i];
        terms.push(rows.w_l[i] * el + rows.w_r[i] * er - c * lse);
        if derivs {
            let (pl, pr) = ((el - lse).exp(), (er - lse).exp());
            add_vec(&mut grad, 0, x, rows.w_l[i] - c * pl);
            add_vec(&mut grad, d, x, rows.w_r[i] - c * pr);
            add_outer(&mut neg_hess, n2, 0, 0, x, c * pl * (F::one() - pl));
            add_outer(&mut neg_hess, n2, d, d, x, c * pr * (F::one() - pr));
            add_outer(&mut neg_hess, n2, 0, d, x, -c * pl * pr);
            add_outer(&mut neg_hess, n2, d, 0, x, -c * pl * pr);
        }
    }
    Quadratic { value: compensated_sum(terms), grad, neg_hess, fallback: None }
}

/// Weighted beta log-likelihood `Σ (k - 1) S - W log B(k, γ)` in the shape
/// coefficients, up to terms free of `k`.
pub(crate) fn beta_objective<F: Scalar>(
    x: &[F],
    p: usize,
    w: &[F],
    s: &[F],
    gamma: F,
    beta: &[F],
    derivs: bool,
) -> Quadratic<F> {
    let d = p + 1;
    let kern = BetaShapeKernel::new(gamma.as_f64());
    let mut terms = Vec::with_capacity(w.len());
    let mut grad = vec![F::zero(); if derivs { d } else { 0 }];
    let mut neg_hess = vec![F::zero(); if derivs { d * d } else { 0 }];
    let mut fisher = vec![F::zero(); if derivs { d * d } else { 0 }];
    for i in 0..w.len() {
        let row = &x[i * p..(i + 1) * p];
        let eta = predictor(beta, row);
        let k = F::one() / (F::one() + (-eta).exp());
        let k64 = k.as_f64();
        let wi = w[i];
        terms.push((k - F::one()) * s[i] - wi * F::lit(kern.ln_beta(k64)));
        if derivs {
            let sk = k * (F::one() - k);
            let gk = s[i] - wi * F::lit(kern.digamma_diff(k64));
            let gk1 = -wi * F::lit(kern.trigamma_diff(k64));
            add_vec(&mut grad, 0, row, gk * sk);
            add_outer(&mut neg_hess, d, 0, 0, row, -(gk1 * sk * sk + gk * sk * (F::one() - F::lit(2.0) * k)));
            add_outer(&mut fisher, d, 0, 0, row, -gk1 * sk * sk);
        }
    }
    Quadratic { value: compensated_sum(terms), grad, neg_hess, fallback: derivs.then_some(fisher) }
}

/// Value of the M-step objective (θ, β_l and β_r blocks summed).
#[cfg(test)]
pub(crate) fn q_value<F: Scalar>(rows: &MRows<'_, F>, params: &BetaMixtureParams<F>) -> F {
    let theta: Vec<F> = params.theta_l.iter().chain(&params.theta_r).copied().collect();
    theta_objective(rows, &theta, false).value
        + beta_objective(rows.x, rows.p, &rows.w_l, &rows.s_l, params.gamma_l, &params.beta_l, false).value
        + beta_objective(rows.x, rows.p, &rows.w_r, &rows.s_r, params.gamma_r, &params.beta_r, false).value
}

pub(crate) fn fit_theta_block<F: Scalar>(rows: &MRows<'_, F>, start: &[F], cfg: &EmConfig) -> (Vec<F>, bool) {
    let opts = NewtonOptions { max_iter: cfg.inner_iter, bound: F::lit(cfg.coef_bound) };
    let v0 = theta_objective(rows, start, false).value;
    let out = maximize(start, &opts, |t| theta_objective(rows, t, true), |t| theta_objective(rows, t, false).value);
    if out.value >= v0 {
        (out.x, out.value > v0)
    } else {
        (start.to_vec(), false)
    }
}

pub(crate) fn fit_beta_block<F: Scalar>(
    x: &[F],
    p: usize,
    w: &[F],
    s: &[F],
    gamma: F,
    start: &[F],
    cfg: &EmConfig,
) -> (Vec<F>, bool) {
    let total = compensated_sum(w.iter().copied());
    if !(total > F::lit(1e-10)) {
        return (start.to_vec(), false);
    }
    let opts = NewtonOptions { max_iter: cfg.inner_iter, bound: F::lit(cfg.coef_bound) };
    let v0 = beta_objective(x, p, w, s, gamma, start, false).value;
    let out = maximize(
        start,
        &opts,
        |b| beta_objective(x, p, w, s, gamma, b, true),
        |b| beta_objective(x, p, w, s, gamma, b, false).value,
    );
    if out.value >= v0 {
        (out.x, out.value > v0)
    } else {
        (start.to_vec(), false)
    }
}

pub(crate) fn m_step<F: Scalar>(
    stats: &MaskedSufficientStats<F>,
    x: &[F],
    p: usize,
    warm: &BetaMixtureParams<F>,
    cfg: &EmConfig,
) -> MStepOutcome<F> {
    let rows = MRows::new(stats, x, p);
    let d = p + 1;
    let start: Vec<F> = warm.theta_l.iter().chain(&warm.theta_r).copied().collect();
    let (theta, imp_t) = fit_theta_block(&rows, &start, cfg);
    let (beta_l, imp_l) = fit_beta_block(x, p, &rows.w_l, &rows.s_l, warm.gamma_l, &warm.beta_l, cfg);
    let (beta_r, imp_r) = fit_beta_block(x, p, &rows.w_r, &rows.s_r, warm.gamma_r, &warm.beta_r, cfg);
    MStepOutcome {
        params: BetaMixtureParams {
            theta_l: theta[..d].to_vec(),
            theta_r: theta[d..].to_vec(),
            beta_l,
            beta_r,
            gamma_l: warm.gamma_l,
            gamma_r: warm.gamma_r,
        },
        improved: imp_t || imp_l || imp_r,
    }
}

fn obs_key<F: Scalar>(o: &ObsLogs<F>) -> (u8, F, F) {
    match *o {
        ObsLogs::Single(a, b) => (0, a, b),
        ObsLogs::Pair((a, _), (b, _)) => (1, a, b),
    }
}

fn canonical_order<F: Scalar>(design: &Design<'_, F>) -> (Vec<F>, Vec<ObsLogs<F>>) {
    let cmp = |a: F, b: F| a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal);
    let mut order: Vec<usize> = (0..design.m()).collect();
    order.sort_by(|&i, &j| {
        let (ki, kj) = (obs_key(&design.obs[i]), obs_key(&design.obs[j]));
        ki.0.cmp(&kj.0)
            .then(cmp(ki.1, kj.1))
            .then(cmp(ki.2, kj.2))
            .then_with(|| {
                design.row(i).iter().zip(design.row(j)).map(|(a, b)| cmp(*a, *b)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let x = order.iter().flat_map(|&i| design.row(i).iter().copied()).collect();
    let obs = order.iter().map(|&i| design.obs[i]).collect();
    (x, obs)
}

/// Alternates E- and M-steps from `init` until the observed log-likelihood
/// stabilises.
pub(crate) fn run_em<F: Scalar>(design: &Design<'_, F>, init: BetaMixtureParams<F>, cfg: &EmConfig) -> Result<EmFitReport<F>> {
    cfg.validate()?;
    init.validate()?;
    if design.m() < MIN_HYPOTHESES {
        return Err(ZapError::InvalidInput(format!(
            "EM needs at least {MIN_HYPOTHESES} hypotheses, got {}",
            design.m()
        )));
    }
    // Fitting in a canonical order makes the result independent of how the
    // hypotheses are listed, down to the last bit.
    let (x_sorted, obs_sorted) = canonical_order(design);
    let design = &Design { obs: obs_sorted, x: &x_sorted, p: design.p };
    let tol = F::lit(cfg.tol);
    let mut params = init;
    let mut current = e_step(&params, design)?;
    let mut trace = vec![current.loglik];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let next = m_step(&current.stats, design.x, design.p, &params, cfg);
        let estep = e_step(&next.params, design)?;
        let prev = current.loglik;
        // Blocks only accept improving steps, so a drop here is rounding.
        params = next.params;
        current = estep;
        trace.push(current.loglik);
        if (current.loglik - prev).abs() <= tol * current.loglik.abs().max(F::one()) || !next.improved {
            converged = true;
            break;
        }
    }
    Ok(EmFitReport { params, loglik_trace: trace, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_rows(n: usize, p: usize, seed: u64) -> (Vec<f64>, MaskedSufficientStats<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut st = MaskedSufficientStats {
            h_l_hat: vec![],
            h_r_hat: vec![],
            e_logu_l: vec![],
            e_log1mu_l: vec![],
            e_logu_r: vec![],
            e_log1mu_r: vec![],
        };
        for _ in 0..n {
            let u: f64 = rng.random_range(0.001..0.999);
            let wl: f64 = rng.random_range(0.0..0.6);
            let wr: f64 = rng.random_range(0.0..(1.0 - wl));
            st.h_l_hat.push(wl);
            st.h_r_hat.push(wr);
            st.e_logu_l.push(wl * u.ln());
            st.e_log1mu_l.push(wl * (1.0 - u).ln());
            st.e_logu_r.push(wr * u.ln());
            st.e_log1mu_r.push(wr * (1.0 - u).ln());
        }
        (x, st)
    }

    fn check_gradient(q: impl Fn(&[f64], bool) -> Quadratic<f64>, at: &[f64]) {
        let h = 1e-5;
        let an = q(at, true);
        for j in 0..at.len() {
            let mut up = at.to_vec();
            let mut dn = at.to_vec();
            up[j] += h;
            dn[j] -= h;
            let fd = (q(&up, false).value - q(&dn, false).value) / (2.0 * h);
            let g = an.grad[j];
            assert!((fd - g).abs() <= 1e-4 * g.abs().max(1.0), "coord {j}: fd {fd} vs analytic {g}");
        }
        // Curvature: finite differences of the analytic gradient.
        let n = at.len();
        for j in 0..n {
            let mut up = at.to_vec();
            let mut dn = at.to_vec();
            up[j] += h;
            dn[j] -= h;
            let (gu, gd) = (q(&up, true).grad, q(&dn, true).grad);
            for i in 0..n {
                let fd = -(gu[i] - gd[i]) / (2.0 * h);
                let an = an.neg_hess[i * n + j];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "hess ({i},{j}): {fd} vs {an}");
            }
        }
    }

    #[test]
    fn m_step_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for point in 0..20 {
            let p = point % 3;
            let (x, st) = random_rows(40, p, 100 + point as u64);
            let rows = MRows::new(&st, &x, p);
            let d = p + 1;
            let theta: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-2.0..1.0)).collect();
            check_gradient(|t, dv| theta_objective(&rows, t, dv), &theta);
            let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            check_gradient(|b, dv| beta_objective(&x, p, &rows.w_l, &rows.s_l, 4.0, b, dv), &beta);
            check_gradient(|b, dv| beta_objective(&x, p, &rows.w_r, &rows.s_r, 3.0, b, dv), &beta);
        }
    }

    #[test]
    fn m_step_never_decreases_q() {
        for seed in 0..10 {
            let p = (seed % 3) as usize;
            let (x, st) = random_rows(60, p, seed);
            let rows = MRows::new(&st, &x, p);
            let warm = BetaMixtureParams::default_start(p, (4.0, 4.0)).unwrap();
            let out = m_step(&st, &x, p, &warm, &EmConfig::default());
            assert!(q_value(&rows, &out.params) >= q_value(&rows, &warm) - 1e-10);
        }
    }

    #[test]
    fn zero_weights_push_mixing_to_the_box() {
        let (x, mut st) = random_rows(50, 0, 3);
        for v in [&mut st.h_l_hat, &mut st.h_r_hat, &mut st.e_logu_l, &mut st.e_log1mu_l, &mut st.e_logu_r, &mut st.e_log1mu_r] {
            v.iter_mut().for_each(|w| *w = 0.0);
        }
        let warm = BetaMixtureParams::default_start(0, (4.0, 4.0)).unwrap();
        let out = m_step(&st, &x, 0, &warm, &EmConfig::default());
        assert!(out.params.theta_l[0] < -15.0 && out.params.theta_r[0] < -15.0);
        assert_eq!(out.params.beta_l, warm.beta_l);
        assert_eq!(out.params.beta_r, warm.beta_r);
    }

    #[test]
    fn pair_stats_reduce_to_single_when_elements_coincide() {
        let params = BetaMixtureParams::from_intercepts(0.2f64, 0.1, 0.4, 0.6, (4.0, 4.0)).unwrap();
        let dens = params.density_unchecked(&[]);
        let single = point_stats(&dens, &ObsLogs::single(0.13));
        let pair = point_stats(&dens, &ObsLogs::pair(0.13, 0.13));
        for k in 0..6 {
            assert!((single[k] - pair[k]).abs() < 1e-14);
        }
        assert!((pair[6] - single[6] - 2f64.ln()).abs() < 1e-14);
    }
}
