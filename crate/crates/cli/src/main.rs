mod error;
mod input;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zap_core::asymp::AsympConfig;
use zap_core::em::EmConfig;
use zap_core::finite::FiniteRunConfig;
use zap_core::oracle::{OracleMode, OracleModel};
use zap_core::simulation::{Method, MethodSettings, ScenarioConfig};

use crate::error::CliError;
use crate::manifest::{Job, RunManifest, TOOL};

#[derive(Parser)]
#[command(name = "zap", version, about = "Covariate-adaptive multiple testing on z-values")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, env = "ZAP_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Asymptotic procedure with Monte Carlo mirror statistics.
    TestAsymp {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Uniform draws shared by the null references.
        #[arg(long, default_value_t = 50_000)]
        n_mc: usize,
        #[command(flatten)]
        em: EmArgs,
    },
    /// Finite-sample procedure with data masking.
    TestFinite {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        s_l0: f64,
        #[arg(long, default_value_t = 0.8)]
        s_r0: f64,
        /// Reveals between refits (default ⌈m/100⌉).
        #[arg(long)]
        refit_every: Option<usize>,
        #[command(flatten)]
        em: EmArgs,
    },
    /// Benjamini-Hochberg on two-sided p-values.
    Bh {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Oracle procedure under a known generative model.
    Oracle {
        /// JSON scenario, e.g. {"model":"example21","m":1000,"seed":1}.
        #[arg(long)]
        scenario: PathBuf,
        /// Data to test; simulated from the scenario when absent.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Z)]
        mode: ModeArg,
    },
    /// Replication study over simulated data sets.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, value_delimiter = ',', default_value = "zap-asymp,zap-finite,bh")]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "0.05")]
        alpha: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        n_mc: usize,
        #[arg(long, default_value_t = 0.2)]
        s_l0: f64,
        #[arg(long, default_value_t = 0.8)]
        s_r0: f64,
        #[arg(long)]
        refit_every: Option<usize>,
        #[command(flatten)]
        em: EmArgs,
    },
    /// Fit the working model by EM and write its parameters.
    Fit {
        #[command(flatten)]
        io: DataArgs,
        #[command(flatten)]
        em: EmArgs,
    },
    /// Re-run a manifest written by an earlier command.
    Replay {
        manifest: PathBuf,
        /// Write somewhere other than the recorded output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// CSV with a `z` or `u` column and optional `x1..xp`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmArgs {
    #[arg(long, default_value_t = 4.0)]
    gamma_l: f64,
    #[arg(long, default_value_t = 4.0)]
    gamma_r: f64,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

impl EmArgs {
    fn config(&self) -> EmConfig {
        let mut em = EmConfig::default();
        if let Some(t) = self.tol {
            em.tol = t;
        }
        if let Some(n) = self.max_iter {
            em.max_iter = n;
        }
        em
    }
}

#[derive(Args)]
struct ScenarioArgs {
    /// Model name (example21..23, setup1..3, two-sided, global-null) or a JSON scenario file.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 2.0)]
    eps: f64,
    #[arg(long, default_value_t = -2.5, allow_hyphen_values = true)]
    eta: f64,
    #[arg(long, default_value_t = 1.0)]
    zeta: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.2)]
    w: f64,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = -2.5, allow_hyphen_values = true)]
    mu_l: f64,
    #[arg(long, default_value_t = 2.5)]
    mu_r: f64,
    /// Covariate count for global-null.
    #[arg(long, default_value_t = 0)]
    p: usize,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioConfig, CliError> {
        let mut cfg = if self.scenario.ends_with(".json") {
            load_scenario(&PathBuf::from(&self.scenario))?
        } else {
            let (eps, eta, zeta, sigma) = (self.eps, self.eta, self.zeta, self.sigma);
            let model = match self.scenario.as_str() {
                "example21" => OracleModel::Example21,
                "example22" => OracleModel::Example22,
                "example23" => OracleModel::Example23,
                "setup1" => OracleModel::Setup1 { eps, eta, zeta, sigma },
                "setup2" => OracleModel::Setup2 { eps, eta, zeta, sigma },
                "setup3" => OracleModel::Setup3 { eps, eta, zeta, sigma },
                "two-sided" => OracleModel::TwoSided { w: self.w, rho: self.rho, mu_l: self.mu_l, mu_r: self.mu_r },
                "global-null" => OracleModel::GlobalNull { p: self.p },
                other => return Err(CliError::input(None, format!("unknown scenario {other:?}"))),
            };
            ScenarioConfig::new(model, 5000, 0)
        };
        if let Some(m) = self.m {
            cfg.m = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Z,
    P,
}

fn load_scenario(path: &PathBuf) -> Result<ScenarioConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg: ScenarioConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::input(Some(e.line() as u64), format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn finite_config(alpha: f64, seed: u64, s_l0: f64, s_r0: f64, refit_every: Option<usize>, em: &EmArgs) -> FiniteRunConfig {
    FiniteRunConfig {
        alpha,
        seed,
        s_l0,
        s_r0,
        refit_every,
        gamma_l: em.gamma_l,
        gamma_r: em.gamma_r,
        em: em.config(),
        ..FiniteRunConfig::default()
    }
}

fn manifest_for(command: Command) -> Result<RunManifest, CliError> {
    let build = |input: Option<PathBuf>, output: PathBuf, job: Job| RunManifest { tool: TOOL.into(), input, output, job };
    Ok(match command {
        Command::TestAsymp { io, alpha, seed, n_mc, em } => {
            let asymp = AsympConfig { gamma_l: em.gamma_l, gamma_r: em.gamma_r, n_mc, seed, em: em.config(), ..AsympConfig::default() };
            build(Some(io.input), io.out, Job::TestAsymp { alpha, asymp })
        }
        Command::TestFinite { io, alpha, seed, s_l0, s_r0, refit_every, em } => {
            let finite = finite_config(alpha, seed, s_l0, s_r0, refit_every, &em);
            build(Some(io.input), io.out, Job::TestFinite { finite })
        }
        Command::Bh { io, alpha } => build(Some(io.input), io.out, Job::Bh { alpha }),
        Command::Oracle { scenario, input, out, alpha, mode } => {
            let scenario = load_scenario(&scenario)?;
            let mode = match mode {
                ModeArg::Z => OracleMode::ZScale,
                ModeArg::P => OracleMode::PScale,
            };
            build(input, out, Job::Oracle { alpha, mode, scenario })
        }
        Command::Simulate { scenario, reps, methods, alpha, out, n_mc, s_l0, s_r0, refit_every, em } => {
            let scenario = scenario.resolve()?;
            let settings = MethodSettings {
                asymp: AsympConfig { gamma_l: em.gamma_l, gamma_r: em.gamma_r, n_mc, em: em.config(), ..AsympConfig::default() },
                finite: finite_config(alpha[0], 0, s_l0, s_r0, refit_every, &em),
            };
            build(None, out, Job::Simulate { scenario, reps, methods, alphas: alpha, settings })
        }
        Command::Fit { io, em } => {
            build(Some(io.input), io.out, Job::Fit { gamma_l: em.gamma_l, gamma_r: em.gamma_r, em: em.config() })
        }
        Command::Replay { manifest, out } => {
            let mut m = RunManifest::load(&manifest)?;
            if let Some(out) = out {
                m.output = out;
            }
            m
        }
    })
}

fn run(cli: Cli) -> Result<String, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::input(None, "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::input(None, format!("thread pool: {e}")))?;
    }
    manifest_for(cli.command)?.execute()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::input(None, e.to_string().trim_end().to_string());
            eprintln!("{}", err.record());
            return ExitCode::from(err.exit_code());
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.record());
            ExitCode::from(err.exit_code())
        }
    }
}
