//! Data generators for the benchmark scenarios, error and power metrics,
//! the Benjamini–Hochberg baseline and a seeded replication harness.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymp::{prepare_zap_asymp, AsympConfig};
use crate::error::{Result, ZapError};
use crate::finite::{run_zap_finite_multi, FiniteRunConfig};
use crate::model::TestingInput;
use crate::oracle::{oracle_threshold, run_oracle, OracleMode, OracleModel};
use crate::scalar::compensated_sum;

/// A generative model with a sample size and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(flatten)]
    pub model: OracleModel,
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(model: OracleModel, m: usize, seed: u64) -> Self {
        Self { model, m, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(ZapError::Domain("a scenario needs m >= 1".into()));
        }
        self.model.validate()
    }
}

impl OracleModel {
    /// Short kebab-case name used in tables.
    pub fn name(&self) -> &'static str {
        match self {
            OracleModel::Example21 => "example21",
            OracleModel::Example22 => "example22",
            OracleModel::Example23 => "example23",
            OracleModel::Setup1 { .. } => "setup1",
            OracleModel::Setup2 { .. } => "setup2",
            OracleModel::Setup3 { .. } => "setup3",
            OracleModel::TwoSided { .. } => "two-sided",
            OracleModel::GlobalNull { .. } => "global-null",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Null,
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTruth {
    /// `H_i`: true for non-nulls.
    pub h: Vec<bool>,
    /// Mean of the component each z was drawn from.
    pub mu: Vec<f64>,
    pub component: Vec<Component>,
}

impl SimulatedTruth {
    pub fn n_nonnull(&self) -> usize {
        self.h.iter().filter(|&&h| h).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub data: TestingInput<f64>,
    pub truth: SimulatedTruth,
    pub model: OracleModel,
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_covariates<R: Rng>(model: &OracleModel, rng: &mut R, out: &mut Vec<f64>) {
    match model {
        OracleModel::Setup1 { .. } | OracleModel::Setup2 { .. } | OracleModel::Setup3 { .. } => {
            let half = Normal::new(0.0, 0.5f64.sqrt()).expect("valid scale");
            out.push(rng.sample(half));
            out.push(rng.sample(half));
        }
        _ => {
            for _ in 0..model.covariate_dim() {
                out.push(rng.random_range(-1.0..1.0));
            }
        }
    }
}

/// Draws `m` hypotheses from `model` with the given generator.
pub fn generate_with<R: Rng>(model: &OracleModel, m: usize, rng: &mut R) -> Result<SimulatedData> {
    model.validate()?;
    let p = model.covariate_dim();
    let mut x = Vec::with_capacity(m * p);
    let mut z = Vec::with_capacity(m);
    let mut truth = SimulatedTruth { h: Vec::with_capacity(m), mu: Vec::with_capacity(m), component: Vec::with_capacity(m) };
    for i in 0..m {
        draw_covariates(model, rng, &mut x);
        let mix = model.mixture_at(&x[i * p..(i + 1) * p])?;
        let v: f64 = rng.random();
        let noise: f64 = rng.sample(StandardNormal);
        let (component, mu, scale) = if v < mix.w_l {
            (Component::Left, mix.mu_l, mix.sigma)
        } else if v < mix.w_l + mix.w_r {
            (Component::Right, mix.mu_r, mix.sigma)
        } else {
            (Component::Null, 0.0, 1.0)
        };
        z.push(mu + scale * noise);
        truth.h.push(component != Component::Null);
        truth.mu.push(mu);
        truth.component.push(component);
    }
    Ok(SimulatedData { data: TestingInput::from_z(z, x, p)?, truth, model: model.clone() })
}

pub fn generate(config: &ScenarioConfig) -> Result<SimulatedData> {
    config.validate()?;
    generate_with(&config.model, config.m, &mut rng_for(config.seed, 0))
}

/// One of the motivating examples, `id ∈ {2.1, 2.2, 2.3}`.
pub fn gen_example(id: &str, m: usize, seed: u64) -> Result<SimulatedData> {
    let model = match id {
        "2.1" => OracleModel::Example21,
        "2.2" => OracleModel::Example22,
        "2.3" => OracleModel::Example23,
        other => return Err(ZapError::InvalidInput(format!("unknown example {other:?}"))),
    };
    generate(&ScenarioConfig::new(model, m, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetupParams {
    pub eps: f64,
    pub eta: f64,
    pub zeta: f64,
    pub sigma: f64,
}

/// One of the three covariate setups, `id ∈ {1, 2, 3}`.
pub fn gen_setup(id: u8, params: SetupParams, m: usize, seed: u64) -> Result<SimulatedData> {
    let SetupParams { eps, eta, zeta, sigma } = params;
    let model = match id {
        1 => OracleModel::Setup1 { eps, eta, zeta, sigma },
        2 => OracleModel::Setup2 { eps, eta, zeta, sigma },
        3 => OracleModel::Setup3 { eps, eta, zeta, sigma },
        other => return Err(ZapError::InvalidInput(format!("unknown setup {other}"))),
    };
    generate(&ScenarioConfig::new(model, m, seed))
}

/// Covariate-free two-sided mixture.
pub fn gen_two_sided(w: f64, rho: f64, mu_l: f64, mu_r: f64, m: usize, seed: u64) -> Result<SimulatedData> {
    generate(&ScenarioConfig::new(OracleModel::TwoSided { w, rho, mu_l, mu_r }, m, seed))
}

/// Error and power of one rejection set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// False discoveries.
    pub v: usize,
    /// Rejections.
    pub r: usize,
    pub fdp: f64,
    pub tpr: f64,
    pub etd: usize,
}

pub fn metrics(rejected: &[usize], truth: &SimulatedTruth) -> Result<Metrics> {
    let m = truth.h.len();
    let mut seen = vec![false; m];
    for &i in rejected {
        if i >= m {
            return Err(ZapError::InvalidInput(format!("rejected index {i} out of range for m = {m}")));
        }
        seen[i] = true;
    }
    let r = seen.iter().filter(|&&s| s).count();
    let v = (0..m).filter(|&i| seen[i] && !truth.h[i]).count();
    let etd = r - v;
    Ok(Metrics { v, r, fdp: v as f64 / r.max(1) as f64, tpr: etd as f64 / truth.n_nonnull().max(1) as f64, etd })
}

/// Step-up rule: rejects the `k̂` smallest p-values, `k̂ = max{k : p_(k) <= kα/m}`.
pub fn bh_procedure(p_values: &[f64], alpha: f64) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ZapError::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if let Some(i) = p_values.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(ZapError::Domain(format!("p-value {} at {i} is outside [0, 1]", p_values[i])));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let k = (1..=m).rev().find(|&k| p_values[order[k - 1]] <= k as f64 * alpha / m as f64).unwrap_or(0);
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ZapAsymp,
    ZapFinite,
    Bh,
    /// Oracle on `P(H = 0 | Z, X)`.
    OracleZ,
    /// Oracle on `P(H = 0 | P, X)`.
    OracleP,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::ZapAsymp, Method::ZapFinite, Method::Bh, Method::OracleZ, Method::OracleP];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZapAsymp => "zap-asymp",
            Method::ZapFinite => "zap-finite",
            Method::Bh => "bh",
            Method::OracleZ => "oracle-z",
            Method::OracleP => "oracle-p",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ZapError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ZapError::InvalidInput(format!("unknown method {s:?}")))
    }
}

/// Per-method settings shared by every repetition.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodSettings {
    pub asymp: AsympConfig,
    pub finite: FiniteRunConfig,
}

/// One method at one level in one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub method: Method,
    pub alpha: f64,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

/// Means and standard errors over the successful repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub method: Method,
    pub alpha: f64,
    pub reps: usize,
    pub failures: usize,
    pub mean_fdp: f64,
    pub se_fdp: f64,
    pub mean_tpr: f64,
    pub se_tpr: f64,
    pub mean_etd: f64,
    pub se_etd: f64,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = compensated_sum(values.iter().copied()) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    (mean, (ss / (n - 1) as f64 / n as f64).sqrt())
}

impl MetricsSummary {
    pub fn from_records(method: Method, alpha: f64, records: &[&RepRecord]) -> Self {
        let ok: Vec<Metrics> = records.iter().filter_map(|r| r.metrics).collect();
        let (mean_fdp, se_fdp) = mean_se(&ok.iter().map(|m| m.fdp).collect::<Vec<_>>());
        let (mean_tpr, se_tpr) = mean_se(&ok.iter().map(|m| m.tpr).collect::<Vec<_>>());
        let (mean_etd, se_etd) = mean_se(&ok.iter().map(|m| m.etd as f64).collect::<Vec<_>>());
        Self {
            method,
            alpha,
            reps: ok.len(),
            failures: records.len() - ok.len(),
            mean_fdp,
            se_fdp,
            mean_tpr,
            se_tpr,
            mean_etd,
            se_etd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationTable {
    pub scenario: String,
    pub records: Vec<RepRecord>,
    pub summaries: Vec<MetricsSummary>,
}

impl ReplicationTable {
    pub fn summary(&self, method: Method, alpha: f64) -> Option<&MetricsSummary> {
        self.summaries.iter().find(|s| s.method == method && s.alpha == alpha)
    }

    pub fn write_records_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "scenario,method,rep,alpha,fdp,tpr,etd,v,r,error")?;
        for r in &self.records {
            match (&r.metrics, &r.error) {
                (Some(m), _) => writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},",
                    self.scenario, r.method, r.rep, r.alpha, m.fdp, m.tpr, m.etd, m.v, m.r
                )?,
                (None, e) => writeln!(
                    out,
                    "{},{},{},{},,,,,,\"{}\"",
                    self.scenario,
                    r.method,
                    r.rep,
                    r.alpha,
                    e.as_deref().unwrap_or("").replace('"', "\"\"")
                )?,
            }
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "scenario,method,alpha,reps,failures,mean_fdp,se_fdp,mean_tpr,se_tpr,mean_etd,se_etd")?;
        for s in &self.summaries {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.scenario,
                s.method,
                s.alpha,
                s.reps,
                s.failures,
                s.mean_fdp,
                s.se_fdp,
                s.mean_tpr,
                s.se_tpr,
                s.mean_etd,
                s.se_etd
            )?;
        }
        Ok(())
    }
}

/// Rejection sets of every method at every level for one data set.
fn run_methods(
    sim: &SimulatedData,
    methods: &[Method],
    alphas: &[f64],
    settings: &MethodSettings,
    mc_seed: u64,
) -> Vec<(Method, f64, Result<Vec<usize>>)> {
    let mut out = Vec::with_capacity(methods.len() * alphas.len());
    for &method in methods {
        match method {
            Method::ZapAsymp => {
                let cfg = AsympConfig { seed: mc_seed, ..settings.asymp.clone() };
                match prepare_zap_asymp(&sim.data, &cfg) {
                    Ok(run) => out.extend(alphas.iter().map(|&a| (method, a, run.select(a).map(|r| r.rejected)))),
                    Err(e) => out.extend(alphas.iter().map(|&a| (method, a, Err(e.clone())))),
                }
            }
            Method::ZapFinite => match run_zap_finite_multi(&sim.data, alphas, &settings.finite) {
                Ok(runs) => out.extend(alphas.iter().zip(runs).map(|(&a, r)| (method, a, Ok(r.result.rejected)))),
                Err(e) => out.extend(alphas.iter().map(|&a| (method, a, Err(e.clone())))),
            },
            Method::Bh => {
                let p = sim.data.p_values();
                out.extend(alphas.iter().map(|&a| (method, a, bh_procedure(&p, a))));
            }
            Method::OracleZ | Method::OracleP => {
                let mode = if method == Method::OracleZ { OracleMode::ZScale } else { OracleMode::PScale };
                out.extend(alphas.iter().map(|&a| (method, a, run_oracle(&sim.model, &sim.data, a, mode).map(|r| r.rejected))));
            }
        }
    }
    out
}

/// Runs `reps` independent repetitions. Repetition `k` draws its data from
/// stream `k` of the scenario seed, so results do not depend on scheduling.
/// Failures are recorded per repetition instead of aborting the batch.
pub fn replicate(
    scenario: &ScenarioConfig,
    methods: &[Method],
    reps: usize,
    alphas: &[f64],
    settings: &MethodSettings,
) -> Result<ReplicationTable> {
    scenario.validate()?;
    if reps == 0 || methods.is_empty() || alphas.is_empty() {
        return Err(ZapError::InvalidInput("need at least one repetition, method and level".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(ZapError::Domain(format!("alpha must lie in (0, 1), got {a}")));
    }
    let per_rep: Vec<Vec<RepRecord>> = (0..reps)
        .into_par_iter()
        .with_min_len(1)
        .map(|rep| {
            let mut rng = rng_for(scenario.seed, rep as u64);
            let sim = generate_with(&scenario.model, scenario.m, &mut rng);
            let mc_seed = rng.next_u64();
            let results = match &sim {
                Ok(sim) => run_methods(sim, methods, alphas, settings, mc_seed),
                Err(e) => methods
                    .iter()
                    .flat_map(|&m| alphas.iter().map(move |&a| (m, a, Err(e.clone()))))
                    .collect(),
            };
            results
                .into_iter()
                .map(|(method, alpha, res)| {
                    let res = res.and_then(|rej| metrics(&rej, &sim.as_ref().expect("generated").truth));
                    RepRecord {
                        rep,
                        method,
                        alpha,
                        error: res.as_ref().err().map(|e| e.to_string()),
                        metrics: res.ok(),
                    }
                })
                .collect()
        })
        .collect();
    let records: Vec<RepRecord> = per_rep.into_iter().flatten().collect();
    let mut summaries = Vec::new();
    for &method in methods {
        for &alpha in alphas {
            let sel: Vec<&RepRecord> = records.iter().filter(|r| r.method == method && r.alpha == alpha).collect();
            summaries.push(MetricsSummary::from_records(method, alpha, &sel));
        }
    }
    Ok(ReplicationTable { scenario: scenario.model.name().to_string(), records, summaries })
}

/// Level of the oracle's conditional-FDR rule at which its realised FDR,
/// averaged over `reps` draws from `scenario`, is as close to `target_fdr`
/// as possible from below. Draws use streams `0..reps` of the scenario
/// seed; evaluate on a different seed to keep the check honest.
pub fn calibrate_oracle_level(scenario: &ScenarioConfig, mode: OracleMode, target_fdr: f64, reps: usize) -> Result<f64> {
    scenario.validate()?;
    if !(target_fdr > 0.0 && target_fdr < 1.0) || reps == 0 {
        return Err(ZapError::Domain(format!("need a target in (0, 1) and reps >= 1, got {target_fdr} and {reps}")));
    }
    let draws: Vec<(Vec<f64>, Vec<bool>)> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let sim = generate_with(&scenario.model, scenario.m, &mut rng_for(scenario.seed, rep as u64))?;
            let stats = run_oracle(&sim.model, &sim.data, 0.5, mode)?.stats;
            Ok((stats, sim.truth.h))
        })
        .collect::<Result<_>>()?;
    let mean_fdr = |level: f64| -> Result<f64> {
        let fdps = draws
            .iter()
            .map(|(stats, h)| {
                let (_, rej) = oracle_threshold(stats, level)?;
                let v = rej.iter().filter(|&&i| !h[i]).count();
                Ok(v as f64 / rej.len().max(1) as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(compensated_sum(fdps) / reps as f64)
    };
    let (mut lo, mut hi) = (1e-6, 0.999);
    if mean_fdr(lo)? > target_fdr {
        return Ok(lo);
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if mean_fdr(mid)? <= target_fdr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
