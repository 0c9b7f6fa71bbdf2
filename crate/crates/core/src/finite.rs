//! The finite-sample procedure: hypotheses in the candidate sets are masked
//! and revealed one at a time, least significant first, until the
//! estimated FDP drops below the target level.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::masked::initialize_masked_with;
use crate::em::{fit_masked_em_from, EmConfig, MIN_HYPOTHESES};
use crate::error::{Result, ZapError};
use crate::masking::{fdp_finite, masked_view, MaskState, MaskedValue, ThresholdFunctions};
use crate::model::{BetaMixtureParams, TestingInput};
use crate::rejection::RejectionResult;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FiniteRunConfig {
    pub alpha: f64,
    pub s_l0: f64,
    pub s_r0: f64,
    /// Reveals between EM refits; `None` means `⌈m/100⌉`.
    pub refit_every: Option<usize>,
    pub gamma_l: f64,
    pub gamma_r: f64,
    /// Settings for the fit before the first reveal.
    pub em: EmConfig,
    /// Iteration cap for the warm-started refits; `None` uses `em.max_iter`.
    /// Refits start from the previous fit, which is usually close already.
    pub refit_max_iter: Option<usize>,
    /// Carried into manifests; the procedure itself draws no random numbers.
    pub seed: u64,
}

impl Default for FiniteRunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            s_l0: 0.2,
            s_r0: 0.8,
            refit_every: None,
            gamma_l: 4.0,
            gamma_r: 4.0,
            em: EmConfig::default(),
            refit_max_iter: Some(20),
            seed: 0,
        }
    }
}

impl FiniteRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_l0 > 0.0 && self.s_l0 <= 0.25) || !(self.s_r0 >= 0.75 && self.s_r0 < 1.0) {
            return Err(ZapError::Domain(format!(
                "initial thresholds must satisfy 0 < s_l0 <= 0.25 and 0.75 <= s_r0 < 1, got {} and {}",
                self.s_l0, self.s_r0
            )));
        }
        if self.refit_every == Some(0) {
            return Err(ZapError::Domain("refit_every must be at least 1".into()));
        }
        check_alpha(self.alpha)?;
        self.em.validate()
    }

    pub fn refit_every_for(&self, m: usize) -> usize {
        self.refit_every.unwrap_or_else(|| m.div_ceil(100).max(1))
    }

    fn refit_config(&self) -> EmConfig {
        let mut cfg = self.em.clone();
        if let Some(n) = self.refit_max_iter {
            cfg.max_iter = n.max(1);
        }
        cfg
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ZapError::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// One iteration of the reveal loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct RevealStep<F> {
    pub step: usize,
    pub index: usize,
    /// Estimate that failed the stopping check at this step.
    pub fdp: F,
    pub n_reject: usize,
    pub n_accept: usize,
    /// The moved threshold at `index`, before and after the reveal.
    pub threshold_before: F,
    pub threshold_after: F,
    /// Whether the left threshold moved.
    pub left: bool,
    /// Whether the parameters were refitted just before this reveal.
    pub refit: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct RevealTrace<F> {
    pub steps: Vec<RevealStep<F>>,
    /// Refits that failed and fell back to the previous parameters.
    pub failed_refits: usize,
}

impl<F: Scalar> RevealTrace<F> {
    pub fn reveal_order(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.index).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,index,fdp,n_reject,n_accept,side,threshold_before,threshold_after,refit")?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.step,
                s.index,
                s.fdp,
                s.n_reject,
                s.n_accept,
                if s.left { "left" } else { "right" },
                s.threshold_before,
                s.threshold_after,
                s.refit as u8
            )?;
        }
        Ok(())
    }
}

/// `T'_i = â_{X_i}(U'_i)` for every masked index, where `U'_i` is the pair
/// element nearer the extreme of the unit interval.
pub fn score_masked<F: Scalar>(
    params: &BetaMixtureParams<F>,
    state: &MaskState<F>,
    data: &TestingInput<F>,
) -> Result<Vec<(usize, F)>> {
    if state.m() != data.m() {
        return Err(ZapError::Dimension { expected: data.m(), got: state.m() });
    }
    if params.dim() != data.p() + 1 {
        return Err(ZapError::Dimension { expected: data.p() + 1, got: params.dim() });
    }
    let masked = state.masked_indices();
    if masked.is_empty() {
        return Err(ZapError::InvalidInput("no masked hypotheses to score".into()));
    }
    let scores: Vec<(usize, F)> = masked
        .par_iter()
        .with_min_len(256)
        .map(|&i| (i, params.density_unchecked(data.x(i)).assessor(state.u_tilde()[i].extreme())))
        .collect();
    if let Some(&(i, _)) = scores.iter().find(|s| !s.1.is_finite()) {
        return Err(ZapError::NonFinite { index: i, what: "masked score" });
    }
    Ok(scores)
}

/// Highest score first, ties to the smaller index.
fn reveal_ordering<F: Scalar>(a: &(usize, F), b: &(usize, F)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Reveals the masked hypothesis with the largest score.
pub fn reveal_least_significant<F: Scalar>(state: &mut MaskState<F>, scores: &[(usize, F)]) -> Result<usize> {
    let &(j, _) = scores
        .iter()
        .filter(|(i, _)| state.u_tilde()[*i].is_pair())
        .min_by(|a, b| reveal_ordering(a, b))
        .ok_or_else(|| ZapError::InvalidInput("scores cover no masked hypothesis".into()))?;
    state.reveal(j)?;
    Ok(j)
}

/// Outcome of one run of the reveal loop.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteRun<F> {
    pub result: RejectionResult<F>,
    pub trace: RevealTrace<F>,
    pub params: BetaMixtureParams<F>,
    pub final_state: MaskState<F>,
    pub initial_thresholds: ThresholdFunctions<F>,
}

pub fn run_zap_finite<F: Scalar>(data: &TestingInput<F>, config: &FiniteRunConfig) -> Result<FiniteRun<F>> {
    let mut runs = run_zap_finite_multi(data, &[config.alpha], config)?;
    Ok(runs.pop().expect("one level"))
}

/// Runs once and records the stopping point for every level. The reveal
/// sequence does not depend on the level, so each result equals a separate
/// run at that level; the trace is that of the smallest level.
pub fn run_zap_finite_multi<F: Scalar>(
    data: &TestingInput<F>,
    alphas: &[f64],
    config: &FiniteRunConfig,
) -> Result<Vec<FiniteRun<F>>> {
    config.validate()?;
    for &a in alphas {
        check_alpha(a)?;
    }
    if alphas.is_empty() {
        return Err(ZapError::InvalidInput("no levels requested".into()));
    }
    let mut driver = Driver::start(data, config)?;
    let mut pending: Vec<usize> = (0..alphas.len()).collect();
    pending.sort_by(|&a, &b| alphas[b].partial_cmp(&alphas[a]).expect("finite levels"));
    let mut out: Vec<Option<FiniteRun<F>>> = vec![None; alphas.len()];
    loop {
        let fdp = fdp_finite(&driver.state);
        while let Some(&k) = pending.first() {
            if fdp <= F::lit(alphas[k]) {
                out[k] = Some(driver.snapshot(Some(fdp)));
                pending.remove(0);
            } else {
                break;
            }
        }
        if pending.is_empty() {
            break;
        }
        if driver.state.n_masked() == 0 {
            for k in pending.drain(..) {
                out[k] = Some(driver.snapshot(None));
            }
            break;
        }
        driver.advance(fdp)?;
    }
    Ok(out.into_iter().map(|r| r.expect("every level resolved")).collect())
}

/// Runs exactly `steps` reveals (or until nothing is masked) without the
/// stopping check. Used to audit the loop itself.
pub fn run_reveals<F: Scalar>(data: &TestingInput<F>, config: &FiniteRunConfig, steps: usize) -> Result<FiniteRun<F>> {
    config.validate()?;
    let mut driver = Driver::start(data, config)?;
    while driver.trace.steps.len() < steps && driver.state.n_masked() > 0 {
        let fdp = fdp_finite(&driver.state);
        driver.advance(fdp)?;
    }
    Ok(driver.snapshot(None))
}

struct Driver<'a, F> {
    data: &'a TestingInput<F>,
    state: MaskState<F>,
    initial: ThresholdFunctions<F>,
    params: BetaMixtureParams<F>,
    refit_cfg: EmConfig,
    refit_every: usize,
    since_fit: usize,
    /// Reveal queue from the latest fit, stored reversed.
    queue: Vec<(usize, F)>,
    scores: Vec<F>,
    trace: RevealTrace<F>,
}

impl<'a, F: Scalar> Driver<'a, F> {
    fn start(data: &'a TestingInput<F>, config: &FiniteRunConfig) -> Result<Self> {
        let m = data.m();
        if m < MIN_HYPOTHESES {
            return Err(ZapError::InvalidInput(format!("need at least {MIN_HYPOTHESES} hypotheses, got {m}")));
        }
        let initial = ThresholdFunctions::constant(m, F::lit(config.s_l0), F::lit(config.s_r0))?;
        let state = masked_view(data, initial.clone())?;
        let gammas = (F::lit(config.gamma_l), F::lit(config.gamma_r));
        let params = if state.n_masked() > 0 {
            let init = initialize_masked_with(&state, data, gammas, &config.em)?.params0;
            fit_masked_em_from(&state, data, init, &config.em)?.params
        } else {
            BetaMixtureParams::default_start(data.p(), gammas)?
        };
        let scores = state.u_tilde().iter().enumerate().map(|(i, v)| Self::stat(&params, data, i, v)).collect();
        let mut d = Self {
            data,
            state,
            initial,
            params,
            refit_cfg: config.refit_config(),
            refit_every: config.refit_every_for(m),
            since_fit: 0,
            queue: Vec::new(),
            scores,
            trace: RevealTrace::default(),
        };
        if d.state.n_masked() > 0 {
            d.rescore()?;
        }
        Ok(d)
    }

    fn stat(params: &BetaMixtureParams<F>, data: &TestingInput<F>, i: usize, v: &MaskedValue<F>) -> F {
        params.density_unchecked(data.x(i)).assessor(v.extreme())
    }

    fn rescore(&mut self) -> Result<()> {
        let mut scores = score_masked(&self.params, &self.state, self.data)?;
        for &(i, s) in &scores {
            self.scores[i] = s;
        }
        scores.sort_by(|a, b| reveal_ordering(b, a));
        self.queue = scores;
        Ok(())
    }

    fn advance(&mut self, fdp: F) -> Result<()> {
        let mut refit = false;
        if self.since_fit >= self.refit_every {
            match fit_masked_em_from(&self.state, self.data, self.params.clone(), &self.refit_cfg) {
                Ok(fit) => self.params = fit.params,
                Err(e) if e.is_numeric() => self.trace.failed_refits += 1,
                Err(e) => return Err(e),
            }
            self.rescore()?;
            self.since_fit = 0;
            refit = true;
        }
        let (j, _) = self.queue.pop().expect("queue covers the masked set");
        debug_assert!(self.state.u_tilde()[j].is_pair());
        let left = self.state.u_tilde()[j].is_left();
        let th = self.state.thresholds();
        let before = if left { th.s_l[j] } else { th.s_r[j] };
        let (n_reject, n_accept) = (self.state.n_reject(), self.state.n_accept());
        self.state.reveal(j)?;
        let th = self.state.thresholds();
        let after = if left { th.s_l[j] } else { th.s_r[j] };
        self.scores[j] = Self::stat(&self.params, self.data, j, &self.state.u_tilde()[j]);
        self.trace.steps.push(RevealStep {
            step: self.trace.steps.len(),
            index: j,
            fdp,
            n_reject,
            n_accept,
            threshold_before: before,
            threshold_after: after,
            left,
            refit,
        });
        self.since_fit += 1;
        Ok(())
    }

    fn snapshot(&self, fdp: Option<F>) -> FiniteRun<F> {
        let (rejected, fdp_estimate) = match fdp {
            Some(f) => (self.state.rejected(), f),
            None => (Vec::new(), F::infinity()),
        };
        FiniteRun {
            result: RejectionResult { rejected, threshold: None, fdp_estimate, stats: self.scores.clone() },
            trace: self.trace.clone(),
            params: self.params.clone(),
            final_state: self.state.clone(),
            initial_thresholds: self.initial.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::reflect_raw;
    use crate::numeric::normal_cdf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn one_masked(u: f64) -> (TestingInput<f64>, MaskState<f64>) {
        // Fillers sit in the unmasked band between the candidate sets.
        let mut values = vec![0.27; 10];
        values[0] = u;
        let data = TestingInput::from_u(values, vec![], 0).unwrap();
        let state = masked_view(&data, ThresholdFunctions::constant(10, 0.2, 0.8).unwrap()).unwrap();
        (data, state)
    }

    #[test]
    fn score_uses_the_outer_element() {
        let params = BetaMixtureParams::from_intercepts(0.1, 0.1, 0.5, 0.5, (4.0, 4.0)).unwrap();
        for (u, outer) in [(0.4, 0.1), (0.1, 0.1), (0.6, 0.9), (0.9, 0.9)] {
            let (data, state) = one_masked(u);
            let s = score_masked(&params, &state, &data).unwrap();
            assert_eq!(s.len(), 1);
            let expect = params.density_at(&[]).unwrap().assessor(outer);
            assert!((s[0].1 - expect).abs() < 1e-12, "{u}");
        }
        let (data, _) = one_masked(0.27);
        let empty = masked_view(&data, ThresholdFunctions::constant(10, 0.2, 0.8).unwrap()).unwrap();
        assert!(score_masked(&params, &empty, &data).is_err());
    }

    #[test]
    fn null_model_scores_are_one() {
        let params = BetaMixtureParams::new(vec![-20.0], vec![-20.0], vec![0.0], vec![0.0], 4.0, 4.0).unwrap();
        let data: TestingInput<f64> = TestingInput::from_u(vec![0.1, 0.15, 0.9, 0.85, 0.35, 0.27, 0.27, 0.27, 0.72, 0.72], vec![], 0).unwrap();
        let mut state = masked_view(&data, ThresholdFunctions::constant(10, 0.2, 0.8).unwrap()).unwrap();
        let scores = score_masked(&params, &state, &data).unwrap();
        assert_eq!(scores.len(), 5);
        assert!(scores.iter().all(|s| (s.1 - 1.0).abs() < 1e-6), "{scores:?}");
        let flat: Vec<(usize, f64)> = scores.iter().map(|&(i, _)| (i, 1.0)).collect();
        assert_eq!(reveal_least_significant(&mut state, &flat).unwrap(), 0);
        assert_eq!(reveal_least_significant(&mut state, &flat).unwrap(), 1);
    }

    #[test]
    fn reveal_moves_the_threshold_onto_the_outer_element() {
        let (_, mut state) = one_masked(0.4);
        assert_eq!(reveal_least_significant(&mut state, &[(0, 0.7)]).unwrap(), 0);
        assert!((state.thresholds().s_l[0] - 0.1).abs() < 1e-15);
        assert!(state.is_revealed(0));
        assert_eq!(state.n_masked(), 0);

        let (_, mut state) = one_masked(0.6);
        reveal_least_significant(&mut state, &[(0, 0.7)]).unwrap();
        assert!((state.thresholds().s_r[0] - 0.9).abs() < 1e-15);
        assert!(reveal_least_significant(&mut state, &[(0, 0.7)]).is_err());
    }

    #[test]
    fn config_validation() {
        let base = FiniteRunConfig::default();
        assert!(base.validate().is_ok());
        for bad in [
            FiniteRunConfig { s_l0: 0.3, ..base.clone() },
            FiniteRunConfig { s_r0: 0.7, ..base.clone() },
            FiniteRunConfig { refit_every: Some(0), ..base.clone() },
            FiniteRunConfig { alpha: 1.0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!(base.refit_every_for(5000), 50);
        assert_eq!(base.refit_every_for(101), 2);
        assert_eq!(base.refit_every_for(10), 1);
    }

    #[test]
    fn nothing_masked_stops_immediately() {
        // 30 values at the extremes and none in the accept sets.
        let mut u = vec![0.01; 30];
        u.extend(vec![0.72; 30]);
        let data: TestingInput<f64> = TestingInput::from_u(u, vec![], 0).unwrap();
        let run = run_zap_finite(&data, &FiniteRunConfig { alpha: 0.05, ..Default::default() }).unwrap();
        assert!(run.trace.steps.is_empty());
        assert_eq!(run.result.rejected, (0..30).collect::<Vec<_>>());
        assert!((run.result.fdp_estimate - 1.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_hypotheses() {
        let data = TestingInput::from_u(vec![0.1; 9], vec![], 0).unwrap();
        assert!(run_zap_finite(&data, &FiniteRunConfig::default()).is_err());
    }

    fn signal_data(m: usize, seed: u64) -> (TestingInput<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Vec::with_capacity(m);
        let mut x = Vec::with_capacity(m);
        let mut h = Vec::with_capacity(m);
        for _ in 0..m {
            let xi: f64 = rng.random_range(-1.0..1.0);
            let alt = rng.random::<f64>() < 0.2;
            let n: f64 = rng.sample(StandardNormal);
            let mu = if !alt {
                0.0
            } else if rng.random::<f64>() < (1.0 + xi) / 2.0 {
                3.0
            } else {
                -3.0
            };
            z.push(n + mu);
            x.push(xi);
            h.push(alt);
        }
        (TestingInput::from_z(z, x, 1).unwrap(), h)
    }

    #[test]
    fn loop_invariants_hold_along_the_trace() {
        let (data, _) = signal_data(400, 11);
        let cfg = FiniteRunConfig { alpha: 0.1, ..Default::default() };
        let run = run_zap_finite(&data, &cfg).unwrap();
        let steps = &run.trace.steps;
        assert!(!steps.is_empty());
        for (k, s) in steps.iter().enumerate() {
            assert_eq!(s.step, k);
            // Condition (i): thresholds only move outwards.
            if s.left {
                assert!(s.threshold_after <= s.threshold_before);
            } else {
                assert!(s.threshold_after >= s.threshold_before);
            }
            assert!(s.fdp > 0.1);
            if k > 0 {
                let prev = &steps[k - 1];
                assert_eq!(prev.n_reject + prev.n_accept, s.n_reject + s.n_accept + 1);
            }
        }
        assert!(run.final_state.thresholds().refines(&run.initial_thresholds));
        assert!(fdp_finite(&run.final_state) <= 0.1);
        assert!(run.result.fdp_estimate <= 0.1);
        assert!(!run.result.rejected.is_empty());
        let refits = steps.iter().filter(|s| s.refit).count();
        assert_eq!(refits, (steps.len() - 1) / cfg.refit_every_for(400));
    }

    #[test]
    fn multi_level_matches_separate_runs() {
        let (data, _) = signal_data(300, 5);
        let cfg = FiniteRunConfig::default();
        let alphas = [0.2, 0.05, 0.1];
        let multi = run_zap_finite_multi(&data, &alphas, &cfg).unwrap();
        for (k, &a) in alphas.iter().enumerate() {
            let single = run_zap_finite(&data, &FiniteRunConfig { alpha: a, ..cfg.clone() }).unwrap();
            assert_eq!(multi[k].result, single.result, "alpha {a}");
            assert_eq!(multi[k].trace, single.trace);
        }
    }

    /// The other element of `u`'s masked pair. The stored pair can differ
    /// from `u` itself by rounding, so pick the far element.
    fn partner(u: f64) -> f64 {
        match crate::masking::canonical_pair(u) {
            MaskedValue::Pair(lo, hi) => {
                if (u - lo).abs() < (u - hi).abs() {
                    hi
                } else {
                    lo
                }
            }
            MaskedValue::Single(_) => unreachable!(),
        }
    }

    #[test]
    fn reveal_path_ignores_which_pair_element_is_real() {
        let (data, _) = signal_data(300, 21);
        let cfg = FiniteRunConfig { refit_every: Some(7), ..Default::default() };
        let total = 120;
        let base = run_reveals(&data, &cfg, total).unwrap();
        let order = base.trace.reveal_order();
        let initial = masked_view(&data, base.initial_thresholds.clone()).unwrap();
        for t in [0usize, 6, 7, 30, 64, 119] {
            // Swap every hypothesis still masked before step t.
            let still_masked: Vec<usize> =
                initial.masked_indices().into_iter().filter(|i| !order[..t].contains(i)).collect();
            let mut u = data.u_values().to_vec();
            for &i in &still_masked {
                u[i] = partner(u[i]);
                assert_ne!(u[i], data.u_values()[i]);
            }
            let swapped = TestingInput::from_u(u, data.covariates().to_vec(), 1).unwrap();
            let run = run_reveals(&swapped, &cfg, t + 1).unwrap();
            assert_eq!(run.trace.reveal_order(), order[..=t].to_vec(), "t = {t}");
            for (a, b) in run.trace.steps.iter().zip(&base.trace.steps) {
                assert_eq!(a.threshold_after, b.threshold_after);
                assert_eq!(a.left, b.left);
            }
        }
    }

    #[test]
    fn pair_partner_round_trips() {
        for &u in &[0.01, 0.1, 0.2, 0.3, 0.4, 0.49, 0.51, 0.6, 0.74, 0.8, 0.99] {
            let back = partner(partner(u));
            assert_eq!(crate::masking::canonical_pair(back), crate::masking::canonical_pair(u), "{u}");
            assert!((partner(u) - reflect_raw(u)).abs() < 1e-15);
        }
    }

    #[test]
    fn rejections_have_large_effects() {
        let (data, h) = signal_data(500, 3);
        let run = run_zap_finite(&data, &FiniteRunConfig { alpha: 0.1, ..Default::default() }).unwrap();
        let r = &run.result.rejected;
        let false_disc = r.iter().filter(|&&i| !h[i]).count();
        assert!(r.len() > 20);
        assert!((false_disc as f64) / (r.len() as f64) < 0.3);
        let z = data.z_values().unwrap();
        assert!(r.iter().all(|&i| normal_cdf(z[i]) <= 0.2 || normal_cdf(z[i]) >= 0.8));
    }
}
