//! Run manifests and their execution.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zap_core::asymp::{prepare_zap_asymp, AsympConfig};
use zap_core::em::{fit_full_em, EmConfig, EmFitReport};
use zap_core::finite::{run_zap_finite, FiniteRunConfig};
use zap_core::oracle::{run_oracle, OracleMode};
use zap_core::simulation::{bh_procedure, generate, replicate, Method, MethodSettings, ScenarioConfig};
use zap_core::{RejectionResult, TestingInput};

use crate::error::CliError;
use crate::input::read_csv;

pub const TOOL: &str = concat!("zap ", env!("CARGO_PKG_VERSION"));

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(flatten)]
    pub job: Job,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    TestAsymp { alpha: f64, asymp: AsympConfig },
    TestFinite { finite: FiniteRunConfig },
    Bh { alpha: f64 },
    Oracle { alpha: f64, mode: OracleMode, scenario: ScenarioConfig },
    Simulate { scenario: ScenarioConfig, reps: usize, methods: Vec<Method>, alphas: Vec<f64>, settings: MethodSettings },
    Fit { gamma_l: f64, gamma_r: f64, em: EmConfig },
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(Some(e.line() as u64), format!("manifest: {e}")))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    fn input_data(&self) -> Result<TestingInput<f64>, CliError> {
        let path = self.input.as_deref().ok_or_else(|| CliError::input(None, "this command needs --in"))?;
        let loaded = read_csv(path)?;
        if !loaded.clamped_lines.is_empty() {
            let shown: Vec<String> = loaded.clamped_lines.iter().take(10).map(u64::to_string).collect();
            let more = if loaded.clamped_lines.len() > 10 { ", ..." } else { "" };
            eprintln!(
                "warning: {} u-value(s) clamped into [1e-15, 1 - 1e-15] (lines {}{more})",
                loaded.clamped_lines.len(),
                shown.join(", ")
            );
        }
        Ok(loaded.data)
    }

    /// Runs the job and writes every artefact, the manifest included, into `output`.
    pub fn execute(&self) -> Result<String, CliError> {
        let out = Output::create(&self.output)?;
        let summary = match &self.job {
            Job::TestAsymp { alpha, asymp } => {
                let data = self.input_data()?;
                let run = prepare_zap_asymp(&data, asymp)?;
                let result = run.select(*alpha)?;
                out.write("results.csv", |w| write_results(w, &data, &result, Some(&run.stats.t_mirror)))?;
                out.write("params.json", |w| write_json(w, &run.fit.params))?;
                out.write("trace.csv", |w| write_em_trace(w, &run.fit))?;
                rejection_summary(&result, data.m())
            }
            Job::TestFinite { finite } => {
                let data = self.input_data()?;
                let run = run_zap_finite(&data, finite)?;
                out.write("results.csv", |w| write_results(w, &data, &run.result, None))?;
                out.write("params.json", |w| write_json(w, &run.params))?;
                out.write("trace.csv", |w| run.trace.write_csv(w))?;
                let mut s = rejection_summary(&run.result, data.m());
                if run.trace.failed_refits > 0 {
                    s.push_str(&format!(" ({} refits failed and kept the previous fit)", run.trace.failed_refits));
                }
                s
            }
            Job::Bh { alpha } => {
                let data = self.input_data()?;
                let p = data.p_values();
                let rejected = bh_procedure(&p, *alpha)?;
                let result = RejectionResult { rejected, threshold: None, fdp_estimate: f64::NAN, stats: p };
                out.write("results.csv", |w| write_results(w, &data, &result, None))?;
                format!("rejected {} of {}", result.n_rejected(), data.m())
            }
            Job::Oracle { alpha, mode, scenario } => {
                let data = match self.input {
                    Some(_) => self.input_data()?,
                    None => generate(scenario)?.data,
                };
                let result = run_oracle(&scenario.model, &data, *alpha, *mode)?;
                out.write("results.csv", |w| write_results(w, &data, &result, None))?;
                rejection_summary(&result, data.m())
            }
            Job::Simulate { scenario, reps, methods, alphas, settings } => {
                let table = replicate(scenario, methods, *reps, alphas, settings)?;
                out.write("records.csv", |w| table.write_records_csv(w))?;
                out.write("summary.csv", |w| table.write_summary_csv(w))?;
                let mut s = String::from("method      alpha   mean FDP  mean TPR  failures");
                for row in &table.summaries {
                    s.push_str(&format!(
                        "\n{:<11} {:<7} {:<9.4} {:<9.4} {}",
                        row.method.name(),
                        row.alpha,
                        row.mean_fdp,
                        row.mean_tpr,
                        row.failures
                    ));
                }
                s
            }
            Job::Fit { gamma_l, gamma_r, em } => {
                let data = self.input_data()?;
                let fit = fit_full_em(&data, (*gamma_l, *gamma_r), em)?;
                out.write("params.json", |w| write_json(w, &fit.params))?;
                out.write("trace.csv", |w| write_em_trace(w, &fit))?;
                format!("{} EM iterations, converged: {}", fit.iterations, fit.converged)
            }
        };
        out.write("manifest.json", |w| w.write_all(self.to_json().as_bytes()))?;
        Ok(summary)
    }
}

fn rejection_summary(result: &RejectionResult<f64>, m: usize) -> String {
    let mut s = format!("rejected {} of {}", result.n_rejected(), m);
    if result.n_rejected() > 0 && result.fdp_estimate.is_finite() {
        s.push_str(&format!(", estimated FDP {:.4}", result.fdp_estimate));
    }
    s
}

struct Output<'a> {
    dir: &'a Path,
}

impl<'a> Output<'a> {
    fn create(dir: &'a Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir })
    }

    fn write(&self, name: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))
    }
}

fn write_results(
    w: &mut dyn Write,
    data: &TestingInput<f64>,
    result: &RejectionResult<f64>,
    mirror: Option<&[f64]>,
) -> std::io::Result<()> {
    let mask = result.mask(data.m());
    writeln!(w, "index,z,u,statistic,mirror,rejected")?;
    for i in 0..data.m() {
        let z = data.z_values().map(|z| z[i].to_string()).unwrap_or_default();
        let mirror = mirror.map(|t| t[i].to_string()).unwrap_or_default();
        writeln!(w, "{i},{z},{},{},{mirror},{}", data.u(i), result.stats[i], u8::from(mask[i]))?;
    }
    Ok(())
}

fn write_em_trace(w: &mut dyn Write, fit: &EmFitReport<f64>) -> std::io::Result<()> {
    writeln!(w, "iteration,loglik")?;
    for (i, ll) in fit.loglik_trace.iter().enumerate() {
        writeln!(w, "{i},{ll}")?;
    }
    Ok(())
}

fn write_json<T: Serialize>(w: &mut dyn Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    writeln!(w)
}
