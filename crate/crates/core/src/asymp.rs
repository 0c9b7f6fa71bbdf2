//! The asymptotic procedure: assessor statistics, Monte-Carlo mirror
//! statistics and step-wise threshold selection.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit_full_em, EmConfig, EmFitReport};
use crate::error::{Result, ZapError};
use crate::model::{log_pair, BetaMixtureParams, LocalDensity, TestingInput};
use crate::numeric::{clamp_unit, interpolate_sorted, EmpiricalSample, UnitInterval};
use crate::rejection::RejectionResult;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsympConfig {
    pub gamma_l: f64,
    pub gamma_r: f64,
    /// Size of the shared uniform pool.
    pub n_mc: usize,
    pub seed: u64,
    pub em: EmConfig,
    /// Restrict candidate thresholds to at most the smallest null median.
    pub prototype_tmax: bool,
}

impl Default for AsympConfig {
    fn default() -> Self {
        Self { gamma_l: 4.0, gamma_r: 4.0, n_mc: 50_000, seed: 0, em: EmConfig::default(), prototype_tmax: false }
    }
}

impl AsympConfig {
    pub fn gammas<F: Scalar>(&self) -> (F, F) {
        (F::lit(self.gamma_l), F::lit(self.gamma_r))
    }
}

/// Seeded uniforms shared by every hypothesis' null reference, sorted.
#[derive(Debug, Clone)]
pub struct UniformPool<F> {
    values: Vec<F>,
    logs: Vec<(F, F)>,
    seed: u64,
}

impl<F: Scalar> UniformPool<F> {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(ZapError::EmptySample);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values: Vec<F> = (0..n)
            .map(|_| {
                let v: f64 = rng.sample(Open01);
                clamp_unit(F::lit(v))
            })
            .collect();
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite uniforms"));
        Ok(Self::from_sorted(values, seed))
    }

    fn from_sorted(values: Vec<F>, seed: u64) -> Self {
        let logs = values.iter().map(|&u| log_pair(u)).collect();
        Self { values, logs, seed }
    }

    pub fn from_values(values: &[UnitInterval<F>]) -> Result<Self> {
        if values.is_empty() {
            return Err(ZapError::EmptySample);
        }
        let mut v: Vec<F> = values.iter().map(|u| u.get()).collect();
        v.sort_by(|a, b| a.partial_cmp(b).expect("unit interval values"));
        Ok(Self::from_sorted(v, 0))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }
}

/// Sorted sample `{â_x(u_j)}` over the shared uniforms.
pub fn null_reference<F: Scalar>(
    params: &BetaMixtureParams<F>,
    x: &[F],
    shared_uniforms: &[UnitInterval<F>],
) -> Result<EmpiricalSample<F>> {
    if shared_uniforms.is_empty() {
        return Err(ZapError::EmptySample);
    }
    let dens = params.density_at(x)?;
    EmpiricalSample::new(shared_uniforms.iter().map(|u| dens.assessor(u.get())).collect())
}

/// `Ŝ = ecdf(t)` and the mirror `quantile(1 - Ŝ)` in the given null sample.
pub fn mirror_statistic<F: Scalar>(t_i: F, null_sample: &EmpiricalSample<F>) -> Result<F> {
    let s = null_sample.ecdf(t_i);
    null_sample.quantile(F::one() - s)
}

/// Null distribution of the assessor at one covariate value, evaluated
/// lazily over the sorted pool.
///
/// The assessor is unimodal in `u` (its reciprocal is convex), so along the
/// sorted pool it rises to a single peak and falls afterwards. Counts and
/// order statistics then need only binary searches over the two branches.
struct NullAssessor<'a, F> {
    dens: LocalDensity<F>,
    logs: &'a [(F, F)],
    peak: usize,
}

impl<'a, F: Scalar> NullAssessor<'a, F> {
    fn new(dens: LocalDensity<F>, pool: &'a UniformPool<F>) -> Self {
        let mut s = Self { dens, logs: &pool.logs, peak: 0 };
        let (mut lo, mut hi) = (0, s.logs.len() - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if s.at(mid) < s.at(mid + 1) {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        s.peak = lo;
        s
    }

    fn n(&self) -> usize {
        self.logs.len()
    }

    #[inline]
    fn at(&self, j: usize) -> F {
        let (lu, l1u) = self.logs[j];
        self.dens.assessor_logs(lu, l1u)
    }

    /// Ascending branch value `L[i]`, `i <= peak`.
    fn left(&self, i: usize) -> F {
        self.at(i)
    }

    /// Descending branch re-read in ascending order.
    fn right(&self, i: usize) -> F {
        self.at(self.n() - 1 - i)
    }

    fn n_left(&self) -> usize {
        self.peak + 1
    }

    fn n_right(&self) -> usize {
        self.n() - self.n_left()
    }

    fn count_le(&self, t: F) -> usize {
        partition(self.n_left(), |i| self.left(i) <= t) + partition(self.n_right(), |i| self.right(i) <= t)
    }

    /// Zero-based `k`-th smallest value.
    fn kth(&self, k: usize) -> F {
        let (nl, nr) = (self.n_left(), self.n_right());
        // Number of elements taken from the left branch.
        let (mut lo, mut hi) = (k.saturating_sub(nr.saturating_sub(1)).min(nl), (k + 1).min(nl));
        if k + 1 > nr {
            lo = lo.max(k + 1 - nr);
        }
        while lo < hi {
            let i = (lo + hi) / 2;
            // Taking i from the left: valid once left[i] >= right[k - i].
            if k - i < nr && self.left(i) < self.right(k - i) {
                lo = i + 1;
            } else {
                hi = i;
            }
        }
        let i = lo;
        let from_left = if i > 0 { Some(self.left(i - 1)) } else { None };
        let from_right = if k + 1 > i { Some(self.right(k - i)) } else { None };
        match (from_left, from_right) {
            (Some(a), Some(b)) => a.max(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("k within sample"),
        }
    }

    fn quantile(&self, q: F) -> F {
        interpolate_sorted(self.n(), q, |j| self.kth(j))
    }
}

/// Length of the leading run where `pred` holds, for a predicate that is
/// true then false along `0..n`.
fn partition(n: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Per-hypothesis significance indices and their mirrors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct AssessorStatistics<F> {
    pub t_hat: Vec<F>,
    pub t_mirror: Vec<F>,
    pub s_hat: Vec<F>,
    pub null_samples_seed: u64,
    pub n_monte_carlo: usize,
    /// Smallest null median over hypotheses.
    pub t_max: F,
}

/// `T̂_i = â_{X_i}(U_i)`, `Ŝ_i` and `T̂ᵐ_i` for every hypothesis.
pub fn assessor_statistics<F: Scalar>(
    params: &BetaMixtureParams<F>,
    data: &TestingInput<F>,
    pool: &UniformPool<F>,
) -> Result<AssessorStatistics<F>> {
    if params.dim() != data.p() + 1 {
        return Err(ZapError::Dimension { expected: data.p() + 1, got: params.dim() });
    }
    let n = F::from_usize_lossy(pool.len());
    let half = F::lit(0.5);
    let per: Vec<(F, F, F, F)> = if data.p() == 0 {
        let dens = params.density_unchecked(&[]);
        let sample = EmpiricalSample::new(pool.logs.iter().map(|&(a, b)| dens.assessor_logs(a, b)).collect())?;
        let median = sample.quantile(half)?;
        (0..data.m())
            .into_par_iter()
            .with_min_len(256)
            .map(|i| {
                let t = dens.assessor(data.u(i));
                let s = sample.ecdf(t);
                (t, sample.quantile(F::one() - s).expect("level in [0, 1]"), s, median)
            })
            .collect()
    } else {
        (0..data.m())
            .into_par_iter()
            .with_min_len(16)
            .map(|i| {
                let dens = params.density_unchecked(data.x(i));
                let t = dens.assessor(data.u(i));
                let null = NullAssessor::new(dens, pool);
                let s = F::from_usize_lossy(null.count_le(t)) / n;
                (t, null.quantile(F::one() - s), s, null.quantile(half))
            })
            .collect()
    };
    if let Some(i) = per.iter().position(|v| !(v.0.is_finite() && v.1.is_finite())) {
        return Err(ZapError::NonFinite { index: i, what: "assessor statistic" });
    }
    Ok(AssessorStatistics {
        t_hat: per.iter().map(|v| v.0).collect(),
        t_mirror: per.iter().map(|v| v.1).collect(),
        s_hat: per.iter().map(|v| v.2).collect(),
        null_samples_seed: pool.seed(),
        n_monte_carlo: pool.len(),
        t_max: per.iter().map(|v| v.3).fold(F::infinity(), F::min),
    })
}

fn check_alpha<F: Scalar>(alpha: F) -> Result<()> {
    if !(alpha > F::zero() && alpha < F::one()) {
        return Err(ZapError::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Largest `l` with `(1 + #{T̂ᵐ_i <= T̂_(l)}) / l <= α`; rejects every `T̂_i <= T̂_(k)`.
pub fn select_threshold_asymp<F: Scalar>(t_hat: &[F], t_mirror: &[F], alpha: F) -> Result<RejectionResult<F>> {
    select_threshold_capped(t_hat, t_mirror, alpha, None)
}

pub(crate) fn select_threshold_capped<F: Scalar>(
    t_hat: &[F],
    t_mirror: &[F],
    alpha: F,
    t_max: Option<F>,
) -> Result<RejectionResult<F>> {
    check_alpha(alpha)?;
    if t_hat.len() != t_mirror.len() {
        return Err(ZapError::Dimension { expected: t_hat.len(), got: t_mirror.len() });
    }
    if let Some(i) = t_hat.iter().chain(t_mirror).position(|v| v.is_nan()) {
        return Err(ZapError::NonFinite { index: i % t_hat.len().max(1), what: "statistic" });
    }
    let m = t_hat.len();
    let mut sorted_t = t_hat.to_vec();
    sorted_t.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let mut sorted_m = t_mirror.to_vec();
    sorted_m.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let mut best: Option<(F, F)> = None;
    for l in 1..=m {
        let t = sorted_t[l - 1];
        if l < m && sorted_t[l] == t {
            continue;
        }
        if t_max.is_some_and(|cap| t > cap) {
            break;
        }
        let below = sorted_m.partition_point(|&v| v <= t);
        let fdp = F::from_usize_lossy(1 + below) / F::from_usize_lossy(l);
        if fdp <= alpha {
            best = Some((t, fdp));
        }
    }
    Ok(match best {
        Some((t, fdp)) => RejectionResult {
            rejected: (0..m).filter(|&i| t_hat[i] <= t).collect(),
            threshold: Some(t),
            fdp_estimate: fdp,
            stats: t_hat.to_vec(),
        },
        None => RejectionResult { rejected: Vec::new(), threshold: None, fdp_estimate: F::infinity(), stats: t_hat.to_vec() },
    })
}

/// A fitted model with its statistics; thresholds for any α follow cheaply.
#[derive(Debug, Clone, PartialEq)]
pub struct AsympRun<F> {
    pub fit: EmFitReport<F>,
    pub stats: AssessorStatistics<F>,
    prototype_tmax: bool,
}

impl<F: Scalar> AsympRun<F> {
    pub fn select(&self, alpha: F) -> Result<RejectionResult<F>> {
        let cap = self.prototype_tmax.then_some(self.stats.t_max);
        select_threshold_capped(&self.stats.t_hat, &self.stats.t_mirror, alpha, cap)
    }
}

/// Fits the working model and computes the statistics.
pub fn prepare_zap_asymp<F: Scalar>(data: &TestingInput<F>, config: &AsympConfig) -> Result<AsympRun<F>> {
    let fit = fit_full_em(data, config.gammas(), &config.em)?;
    let pool = UniformPool::new(config.n_mc, config.seed)?;
    let stats = assessor_statistics(&fit.params, data, &pool)?;
    Ok(AsympRun { fit, stats, prototype_tmax: config.prototype_tmax })
}

pub fn run_zap_asymp<F: Scalar>(data: &TestingInput<F>, alpha: F, config: &AsympConfig) -> Result<RejectionResult<F>> {
    check_alpha(alpha)?;
    prepare_zap_asymp(data, config)?.select(alpha)
}

/// One-sample Kolmogorov–Smirnov distance from `Unif(0, 1)`.
pub fn ks_uniform_statistic<F: Scalar>(values: &[F]) -> F {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = F::from_usize_lossy(v.len());
    v.iter().enumerate().fold(F::zero(), |d, (i, &x)| {
        let hi = F::from_usize_lossy(i + 1) / n - x;
        let lo = x - F::from_usize_lossy(i) / n;
        d.max(hi).max(lo)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn sample(v: Vec<f64>) -> EmpiricalSample<f64> {
        EmpiricalSample::new(v).unwrap()
    }

    #[test]
    fn mirror_examples() {
        let s = sample((1..=100).map(|v| v as f64).collect());
        let m = mirror_statistic(10.0, &s).unwrap();
        assert!((m - 90.1).abs() < 1e-12, "{m}");
        let med = s.quantile(0.5).unwrap();
        let odd = sample((1..=101).map(|v| v as f64).collect());
        // Ŝ = 51/101, so the mirror sits at position 100 * 50/101 of 1..=101.
        assert!((mirror_statistic(51.0, &odd).unwrap() - (1.0 + 5000.0 / 101.0)).abs() < 1e-9);
        assert_eq!(med, 50.5);
        assert_eq!(mirror_statistic(0.5, &s).unwrap(), 100.0);
        let m = mirror_statistic(1.0, &s).unwrap();
        assert!((m - 99.01).abs() < 1e-9);
    }

    #[test]
    fn select_examples() {
        let r = select_threshold_asymp(&[0.1f64, 0.2, 0.3], &[0.9, 0.9, 0.9], 0.34).unwrap();
        assert_eq!(r.rejected, vec![0, 1, 2]);
        assert!((r.fdp_estimate - 1.0 / 3.0).abs() < 1e-15);
        let r = select_threshold_asymp(&[0.1, 0.2], &[0.05, 0.05], 0.1).unwrap();
        assert!(r.rejected.is_empty());
        assert_eq!(r.fdp_estimate, f64::INFINITY);
        assert!(select_threshold_asymp(&[0.1, f64::NAN], &[0.05, 0.05], 0.1).is_err());
        assert!(select_threshold_asymp(&[0.1], &[0.05, 0.05], 0.1).is_err());
    }

    #[test]
    fn mirrors_above_every_statistic_reject_all() {
        let t: Vec<f64> = (0..10).map(|i| 0.01 * i as f64).collect();
        let r = select_threshold_asymp(&t, &[0.5; 10], 0.9).unwrap();
        assert_eq!(r.n_rejected(), 10);
        // Mirrors below every statistic make the estimate (1 + m) / l > 1.
        let r = select_threshold_asymp(&t, &[-1.0; 10], 0.9).unwrap();
        assert_eq!(r.n_rejected(), 0);
    }

    #[test]
    fn tied_statistics_are_rejected_together() {
        let r = select_threshold_asymp(&[0.1, 0.2, 0.2, 0.5], &[0.9, 0.9, 0.9, 0.4], 0.4).unwrap();
        assert_eq!(r.rejected, vec![0, 1, 2]);
    }

    fn brute_force(t: &[f64], mirror: &[f64], alpha: f64) -> Vec<usize> {
        let mut best: Option<f64> = None;
        for &cand in t {
            let l = t.iter().filter(|&&v| v <= cand).count();
            let below = mirror.iter().filter(|&&v| v <= cand).count();
            if (1 + below) as f64 / l as f64 <= alpha && best.is_none_or(|b| cand > b) {
                best = Some(cand);
            }
        }
        match best {
            Some(b) => (0..t.len()).filter(|&i| t[i] <= b).collect(),
            None => vec![],
        }
    }

    proptest! {
        #[test]
        fn select_matches_exhaustive_scan(
            t in proptest::collection::vec(0.0f64..1.0, 100),
            mirror in proptest::collection::vec(0.0f64..1.5, 100),
            alpha in 0.05f64..0.6,
        ) {
            let r = select_threshold_asymp(&t, &mirror, alpha).unwrap();
            prop_assert_eq!(r.rejected, brute_force(&t, &mirror, alpha));
        }

        #[test]
        fn rejections_grow_with_alpha(
            t in proptest::collection::vec(0.0f64..1.0, 60),
            mirror in proptest::collection::vec(0.0f64..1.5, 60),
            a1 in 0.01f64..0.5,
            da in 0.0f64..0.4,
        ) {
            let small = select_threshold_asymp(&t, &mirror, a1).unwrap().rejected;
            let large = select_threshold_asymp(&t, &mirror, a1 + da).unwrap().rejected;
            prop_assert!(small.iter().all(|i| large.contains(i)));
        }
    }

    fn random_params(seed: u64) -> BetaMixtureParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |lo: f64, hi: f64| rng.random_range(lo..hi);
        BetaMixtureParams::new(
            vec![v(-4.0, 0.0), v(-1.0, 1.0)],
            vec![v(-4.0, 0.0), v(-1.0, 1.0)],
            vec![v(-2.0, 2.0), v(-1.0, 1.0)],
            vec![v(-2.0, 2.0), v(-1.0, 1.0)],
            v(2.5, 8.0),
            v(2.5, 8.0),
        )
        .unwrap()
    }

    #[test]
    fn fast_null_reference_matches_sorting() {
        let pool = UniformPool::<f64>::new(3000, 5).unwrap();
        let units: Vec<UnitInterval<f64>> = pool.values().iter().map(|&u| UnitInterval::new(u).unwrap()).collect();
        for seed in 0..30 {
            let params = random_params(seed);
            let x = [seed as f64 / 15.0 - 1.0];
            let brute = null_reference(&params, &x, &units).unwrap();
            let fast = NullAssessor::new(params.density_at(&x).unwrap(), &pool);
            for k in (0..3000).step_by(37).chain([0, 2999]) {
                assert_eq!(fast.kth(k), brute.values()[k], "seed {seed} k {k}");
            }
            for &t in &[0.0, 0.3, 0.7, 0.95, 0.999, 1.0] {
                let t = brute.quantile(t).unwrap();
                assert_eq!(fast.count_le(t), brute.values().partition_point(|&v| v <= t));
            }
            for &q in &[0.0, 0.01, 0.5, 0.93, 1.0] {
                assert_eq!(fast.quantile(q), brute.quantile(q).unwrap());
            }
        }
    }

    #[test]
    fn null_only_reference_is_constant() {
        let params = BetaMixtureParams::new(vec![-50.0], vec![-50.0], vec![0.0], vec![0.0], 4.0, 4.0).unwrap();
        let pool = UniformPool::<f64>::new(2000, 1).unwrap();
        let units: Vec<UnitInterval<f64>> = pool.values().iter().map(|&u| UnitInterval::new(u).unwrap()).collect();
        let s = null_reference(&params, &[], &units).unwrap();
        assert!(s.values().iter().all(|&v| (v - 1.0).abs() < 1e-9));
        assert!(null_reference(&params, &[], &[]).is_err());
    }

    #[test]
    fn symmetric_model_reference_is_pairing_invariant() {
        let params = BetaMixtureParams::from_intercepts(0.1, 0.1, 0.4, 0.4, (4.0, 4.0)).unwrap();
        let base: Vec<f64> = (1..500).map(|j| j as f64 / 1000.0).collect();
        let mirrored: Vec<UnitInterval<f64>> = base.iter().map(|&u| UnitInterval::clamped(1.0 - u).unwrap()).collect();
        let base: Vec<UnitInterval<f64>> = base.iter().map(|&u| UnitInterval::clamped(u).unwrap()).collect();
        let a = null_reference(&params, &[], &base).unwrap();
        let b = null_reference(&params, &[], &mirrored).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn s_hat_is_the_direct_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 50;
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(0.001..0.999)).collect();
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = TestingInput::from_u(u, x, 1).unwrap();
        let params = random_params(8);
        let pool = UniformPool::new(4000, 2).unwrap();
        let st = assessor_statistics(&params, &data, &pool).unwrap();
        for i in 0..m {
            let dens = params.density_at(data.x(i)).unwrap();
            let count = pool.values().iter().filter(|&&v| dens.assessor(v) <= st.t_hat[i]).count();
            assert_eq!(st.s_hat[i], count as f64 / 4000.0);
        }
    }

    #[test]
    fn ks_statistic_examples() {
        assert!((ks_uniform_statistic(&[0.5f64]) - 0.5).abs() < 1e-15);
        let grid: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!((ks_uniform_statistic(&grid) - 0.0005).abs() < 1e-12);
    }
}
