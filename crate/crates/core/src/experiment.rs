//! Seeded multi-trial experiments: the convergence run at a single
//! measurement rate, the rate sweep, and CSV emission of their aggregates.
//!
//! Every trial draws a fresh `(x_true, H, e)` from seeds derived from the
//! master seed, the rate index, the trial index and the stream role, so all
//! solvers within a trial see bit-identical data and results do not depend on
//! the number of worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::denoiser::MmseDenoiser;
use crate::error::{Error, Result};
use crate::linear_model::{LipschitzEstimate, MeasurementOperator, ProblemInstance};
use crate::prior::BernoulliGaussianPrior;
use crate::solvers::{gamp, lasso_ista, pnp_ista, SolverTrace, TraceOptions, DEFAULT_DAMPING, DEFAULT_MAX_ITER};

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_N: usize = 1024;
pub const DEFAULT_TRIALS: usize = 20;
pub const FULL_N: usize = 4096;
pub const FULL_TRIALS: usize = 100;
pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_INPUT_SNR_DB: f64 = 20.0;
/// Measurement rate used by `converge` when none is given.
pub const DEFAULT_CONVERGENCE_RATE: f64 = 0.8;

/// A run fails when strictly more than this fraction of its trials fail.
pub const FAILURE_BUDGET: f64 = 0.05;

pub const CONVERGENCE_COST_CSV: &str = "convergence_cost.csv";
pub const CONVERGENCE_SNR_CSV: &str = "convergence_snr.csv";
pub const RATE_SWEEP_CSV: &str = "rate_sweep.csv";
pub const SELECTIONS_CSV: &str = "selections.csv";

/// `count` logarithmically spaced points from `lo` to `hi`, both included.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == count - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (count - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// λ factors relative to `‖Hᵀy‖_∞`: 15 points over `[1e-4, 1]`.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-4, 1.0, 15)
}

/// Denoiser noise levels: 9 points over `[0.01, 0.37]`.
pub fn default_sigma_grid() -> Vec<f64> {
    log_grid(0.01, 0.37, 9)
}

/// `0.1, 0.2, …, 0.9`.
pub fn default_rates() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Pnp,
    Lasso,
    Gamp,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Pnp, SolverKind::Lasso, SolverKind::Gamp];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Pnp => "pnp",
            SolverKind::Lasso => "lasso",
            SolverKind::Gamp => "gamp",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pnp" => Ok(SolverKind::Pnp),
            "lasso" => Ok(SolverKind::Lasso),
            "gamp" => Ok(SolverKind::Gamp),
            other => Err(Error::config(format!("unknown solver '{other}' (expected pnp, lasso or gamp)"))),
        }
    }
}

/// Parses a comma-separated solver list; an empty string gives an empty set.
pub fn parse_solver_list(s: &str) -> Result<Vec<SolverKind>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

/// How the ISTA step size is chosen for each instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaPolicy {
    /// `0.99 / L̂` from power iteration.
    Auto,
    /// A fixed step, which may exceed `1/L̂`.
    Explicit(f64),
}

impl GammaPolicy {
    pub fn resolve(self, lipschitz: &LipschitzEstimate) -> f64 {
        match self {
            GammaPolicy::Auto => lipschitz.default_step(),
            GammaPolicy::Explicit(g) => g,
        }
    }

    pub fn is_explicit(self) -> bool {
        matches!(self, GammaPolicy::Explicit(_))
    }
}

/// Tolerances of the `validate` suite.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationTolerances {
    /// `|D(z) − (z − σ²h_σ'(z))| / max(1, |z|)`.
    pub tweedie: f64,
    pub derivative_identity: f64,
    pub derivative_fd: f64,
    pub inverse: f64,
    /// Relative error of analytic against finite-difference gradients.
    pub gradient_fd: f64,
    pub mm_sandwich: f64,
    /// Allowed per-step increase of `f`, relative to `|f(x⁰)|`.
    pub monotonicity: f64,
}

impl Default for ValidationTolerances {
    fn default() -> Self {
        Self {
            tweedie: 1e-9,
            derivative_identity: 1e-8,
            derivative_fd: 1e-6,
            inverse: 1e-9,
            gradient_fd: 1e-5,
            mm_sandwich: 1e-9,
            monotonicity: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n: usize,
    /// Ascending rates `m/n` in `(0, 1]`.
    pub measurement_rates: Vec<f64>,
    pub alpha: f64,
    pub input_snr_db: f64,
    pub trials: usize,
    pub solvers: Vec<SolverKind>,
    pub max_iter: usize,
    /// LASSO λ candidates as multiples of `‖Hᵀy‖_∞`.
    pub lambda_grid: Vec<f64>,
    /// PnP denoiser noise-level candidates.
    pub sigma_grid: Vec<f64>,
    pub gamma: GammaPolicy,
    pub gamp_damping: f64,
    /// Objective tracing interval of the selected PnP run.
    pub trace_interval: usize,
    /// Worker threads; `None` uses rayon's global pool.
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub validation: ValidationTolerances,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            n: DEFAULT_N,
            measurement_rates: default_rates(),
            alpha: DEFAULT_ALPHA,
            input_snr_db: DEFAULT_INPUT_SNR_DB,
            trials: DEFAULT_TRIALS,
            solvers: SolverKind::ALL.to_vec(),
            max_iter: DEFAULT_MAX_ITER,
            lambda_grid: default_lambda_grid(),
            sigma_grid: default_sigma_grid(),
            gamma: GammaPolicy::Auto,
            gamp_damping: DEFAULT_DAMPING,
            trace_interval: 1,
            threads: None,
            output_dir: PathBuf::from("results"),
            validation: ValidationTolerances::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum GammaSetting {
    Value(f64),
    Name(String),
}

/// On-disk form: every key optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    n: Option<usize>,
    measurement_rates: Option<Vec<f64>>,
    alpha: Option<f64>,
    input_snr_db: Option<f64>,
    trials: Option<usize>,
    solvers: Option<Vec<SolverKind>>,
    max_iter: Option<usize>,
    lambda_grid: Option<Vec<f64>>,
    sigma_grid: Option<Vec<f64>>,
    gamma: Option<GammaSetting>,
    gamp_damping: Option<f64>,
    trace_interval: Option<usize>,
    threads: Option<usize>,
    output_dir: Option<PathBuf>,
    validation: Option<ValidationTolerances>,
}

impl ExperimentConfig {
    /// Restores the full-size setting: `n = 4096`, 100 trials.
    pub fn full_scale(mut self) -> Self {
        self.n = FULL_N;
        self.trials = FULL_TRIALS;
        self
    }

    /// Applies the keys of a TOML document on top of `self`.
    pub fn merge_toml(mut self, text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        macro_rules! take {
            ($($field:ident),*) => { $(if let Some(v) = file.$field { self.$field = v; })* };
        }
        take!(seed, n, measurement_rates, alpha, input_snr_db, trials, solvers, max_iter, lambda_grid, sigma_grid, gamp_damping, trace_interval, output_dir, validation);
        if let Some(t) = file.threads {
            self.threads = Some(t);
        }
        match file.gamma {
            None => {}
            Some(GammaSetting::Value(g)) => self.gamma = GammaPolicy::Explicit(g),
            Some(GammaSetting::Name(s)) if s.eq_ignore_ascii_case("auto") => self.gamma = GammaPolicy::Auto,
            Some(GammaSetting::Name(s)) => return Err(Error::config(format!("gamma must be \"auto\" or a number, got \"{s}\""))),
        }
        Ok(self)
    }

    pub fn load(self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        self.merge_toml(&text)
    }

    /// Checks every invariant that does not depend on the subcommand.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        if self.n == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter must be at least 1"));
        }
        if self.trace_interval == 0 {
            return Err(Error::config("trace_interval must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !self.input_snr_db.is_finite() {
            return Err(Error::config("input_snr_db must be finite"));
        }
        if !(self.gamp_damping > 0.0 && self.gamp_damping <= 1.0) {
            return Err(Error::config(format!("gamp_damping must lie in (0, 1], got {}", self.gamp_damping)));
        }
        if self.solvers.is_empty() {
            return Err(Error::config("solver set is empty"));
        }
        if self.measurement_rates.is_empty() {
            return Err(Error::config("no measurement rates given"));
        }
        for &r in &self.measurement_rates {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!("measurement rate {r} is outside (0, 1]")));
            }
        }
        if self.measurement_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("measurement rates must be strictly ascending"));
        }
        if self.solvers.contains(&SolverKind::Pnp) && self.sigma_grid.is_empty() {
            return Err(Error::config("sigma_grid is empty but pnp is enabled"));
        }
        if self.solvers.contains(&SolverKind::Lasso) && self.lambda_grid.is_empty() {
            return Err(Error::config("lambda_grid is empty but lasso is enabled"));
        }
        for &s in &self.sigma_grid {
            positive("sigma_grid entry", s)?;
        }
        for &l in &self.lambda_grid {
            positive("lambda_grid entry", l)?;
        }
        if let GammaPolicy::Explicit(g) = self.gamma {
            positive("gamma", g)?;
        }
        let v = &self.validation;
        for (name, tol) in [
            ("tweedie", v.tweedie),
            ("derivative_identity", v.derivative_identity),
            ("derivative_fd", v.derivative_fd),
            ("inverse", v.inverse),
            ("gradient_fd", v.gradient_fd),
            ("mm_sandwich", v.mm_sandwich),
        ] {
            positive(&format!("validation.{name}"), tol)?;
        }
        if !(v.monotonicity >= 0.0) {
            return Err(Error::config("validation.monotonicity must be nonnegative"));
        }
        Ok(())
    }

    pub fn prior(&self) -> Result<BernoulliGaussianPrior> {
        BernoulliGaussianPrior::new(self.alpha)
    }

    /// `m = round(rate · n)`, at least 1.
    pub fn measurements(&self, rate: f64) -> usize {
        ((rate * self.n as f64).round() as usize).max(1)
    }

    pub fn enabled(&self, solver: SolverKind) -> bool {
        self.solvers.contains(&solver)
    }
}

/// Independent random stream within one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Signal = 1,
    Matrix = 2,
    Noise = 3,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one stream, hashed from `(master, rate_index, trial_index, role)`.
pub fn subseed(master: u64, rate_index: usize, trial_index: usize, role: StreamRole) -> u64 {
    [rate_index as u64, trial_index as u64, role as u64]
        .into_iter()
        .fold(splitmix64(master), |h, w| splitmix64(h ^ w))
}

/// The shared instance of trial `trial_index` at rate `rate_index`.
pub fn trial_instance(config: &ExperimentConfig, rate_index: usize, trial_index: usize) -> Result<ProblemInstance> {
    let rate = *config
        .measurement_rates
        .get(rate_index)
        .ok_or_else(|| Error::invalid(format!("rate index {rate_index} out of range")))?;
    let stream = |role| ChaCha8Rng::seed_from_u64(subseed(config.seed, rate_index, trial_index, role));
    let x = config.prior()?.sample_signal(config.n, &mut stream(StreamRole::Signal))?;
    let h = MeasurementOperator::gaussian(config.measurements(rate), config.n, &mut stream(StreamRole::Matrix))?;
    ProblemInstance::at_input_snr(h, x, config.input_snr_db, &mut stream(StreamRole::Noise))
}

#[derive(Debug, Clone)]
pub struct PnpRun {
    pub sigma: f64,
    pub gamma: f64,
    pub trace: SolverTrace,
}

#[derive(Debug, Clone)]
pub struct LassoRun {
    /// Absolute λ (the grid factor times `‖Hᵀy‖_∞`).
    pub lambda: f64,
    pub gamma: f64,
    pub trace: SolverTrace,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub rate_index: usize,
    pub trial: usize,
    pub lipschitz: LipschitzEstimate,
    pub pnp: Option<PnpRun>,
    pub lasso: Option<LassoRun>,
    pub gamp: Option<SolverTrace>,
}

impl TrialResult {
    pub fn trace(&self, solver: SolverKind) -> Option<&SolverTrace> {
        match solver {
            SolverKind::Pnp => self.pnp.as_ref().map(|r| &r.trace),
            SolverKind::Lasso => self.lasso.as_ref().map(|r| &r.trace),
            SolverKind::Gamp => self.gamp.as_ref(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialFailure {
    pub rate_index: usize,
    pub trial: usize,
    pub message: String,
}

/// Keeps the candidate with the highest final SNR; ties keep the earlier one.
fn best_by_snr<T>(best: &mut Option<(f64, T)>, snr: f64, candidate: T) {
    if snr.is_nan() {
        return;
    }
    if best.as_ref().map_or(true, |(b, _)| snr > *b) {
        *best = Some((snr, candidate));
    }
}

/// Runs every enabled solver on one shared instance.
///
/// With `full_trace` the selected PnP-ISTA σ is re-run with objective and
/// gradient tracing; otherwise only SNR traces are kept.
pub fn run_trial(config: &ExperimentConfig, rate_index: usize, trial: usize, full_trace: bool) -> Result<TrialResult> {
    let problem = trial_instance(config, rate_index, trial)?;
    let prior = config.prior()?;
    let lipschitz = problem.lipschitz()?;
    let gamma = config.gamma.resolve(&lipschitz);
    let allow_large_step = config.gamma.is_explicit();

    let pnp = if config.enabled(SolverKind::Pnp) {
        let search = TraceOptions {
            allow_large_step,
            ..TraceOptions::snr_only()
        };
        let mut best = None;
        for &sigma in &config.sigma_grid {
            let d = MmseDenoiser::new(prior, sigma)?;
            let trace = pnp_ista(&problem, &d, gamma, config.max_iter, search)?;
            best_by_snr(&mut best, trace.final_snr(), (sigma, trace));
        }
        let (_, (sigma, mut trace)) = best.ok_or_else(|| Error::numerical(config.max_iter, "no PnP run produced a finite SNR"))?;
        if full_trace {
            let opts = TraceOptions {
                interval: config.trace_interval,
                objective: true,
                grad_tol: None,
                allow_large_step,
            };
            trace = pnp_ista(&problem, &MmseDenoiser::new(prior, sigma)?, gamma, config.max_iter, opts)?;
        }
        Some(PnpRun { sigma, gamma, trace })
    } else {
        None
    };

    let lasso = if config.enabled(SolverKind::Lasso) {
        // LASSO's own monotonicity needs γ ≤ 1/L̂ regardless of the PnP step
        let gamma = gamma.min(lipschitz.default_step());
        let scale = problem
            .operator()
            .apply_adjoint(problem.y().view())
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let mut best = None;
        for &factor in &config.lambda_grid {
            let lambda = factor * scale;
            let trace = lasso_ista(&problem, lambda, gamma, config.max_iter)?;
            best_by_snr(&mut best, trace.final_snr(), (lambda, trace));
        }
        let (_, (lambda, trace)) = best.ok_or_else(|| Error::numerical(config.max_iter, "no LASSO run produced a finite SNR"))?;
        Some(LassoRun { lambda, gamma, trace })
    } else {
        None
    };

    let gamp = if config.enabled(SolverKind::Gamp) {
        Some(gamp(&problem, &prior, config.max_iter, config.gamp_damping)?)
    } else {
        None
    };

    Ok(TrialResult {
        rate_index,
        trial,
        lipschitz,
        pnp,
        lasso,
        gamp,
    })
}

/// Successful trials in `(rate_index, trial)` order plus the failed ones.
#[derive(Debug, Clone)]
pub struct TrialSet {
    pub results: Vec<TrialResult>,
    pub failures: Vec<TrialFailure>,
}

fn run_trials(config: &ExperimentConfig, full_trace: bool) -> Result<TrialSet> {
    let items: Vec<(usize, usize)> = (0..config.measurement_rates.len())
        .flat_map(|r| (0..config.trials).map(move |t| (r, t)))
        .collect();
    let work = || -> Vec<std::result::Result<TrialResult, TrialFailure>> {
        items
            .par_iter()
            .map(|&(r, t)| {
                run_trial(config, r, t, full_trace).map_err(|e| TrialFailure {
                    rate_index: r,
                    trial: t,
                    message: e.to_string(),
                })
            })
            .collect()
    };
    let outcomes = match config.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?
            .install(work),
        None => work(),
    };

    let total = outcomes.len();
    let (ok, failed): (Vec<_>, Vec<_>) = outcomes.into_iter().partition(|o| o.is_ok());
    let set = TrialSet {
        results: ok.into_iter().filter_map(|o| o.ok()).collect(),
        failures: failed.into_iter().filter_map(|o| o.err()).collect(),
    };
    if set.failures.len() as f64 > FAILURE_BUDGET * total as f64 {
        return Err(Error::FailureBudget {
            failed: set.failures.len(),
            total,
        });
    }
    Ok(set)
}

/// Mean, min and max over trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    /// `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        // rounding must not put the mean outside [min, max]
        let mean = (sum / values.len() as f64).clamp(min, max);
        Some(Self { mean, min, max })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub iter: usize,
    pub f_norm: Stats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrRow {
    /// Iteration for convergence output.
    pub iter: usize,
    pub solver: SolverKind,
    pub snr: Stats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub rate: f64,
    pub solver: SolverKind,
    pub snr: Stats,
}

/// One hyperparameter picked by a per-trial grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub rate: f64,
    pub trial: usize,
    pub solver: SolverKind,
    pub param_name: &'static str,
    pub param_value: f64,
}

fn selections(config: &ExperimentConfig, results: &[TrialResult]) -> Vec<Selection> {
    let mut out = Vec::new();
    for r in results {
        let rate = config.measurement_rates[r.rate_index];
        if let Some(p) = &r.pnp {
            out.push(Selection {
                rate,
                trial: r.trial,
                solver: SolverKind::Pnp,
                param_name: "sigma",
                param_value: p.sigma,
            });
        }
        if let Some(l) = &r.lasso {
            out.push(Selection {
                rate,
                trial: r.trial,
                solver: SolverKind::Lasso,
                param_name: "lambda",
                param_value: l.lambda,
            });
        }
    }
    out
}

/// `f(xᵗ)/|f(x⁰)|` at every traced iteration of a PnP run.
///
/// Dividing by the magnitude keeps a descending sequence descending even if
/// `f(x⁰)` is negative, which the nonconvex regularizer permits.
pub fn normalized_cost(trace: &SolverTrace) -> Vec<(usize, f64)> {
    let f = trace.objectives();
    let Some(&(_, f0)) = f.first() else {
        return Vec::new();
    };
    let scale = f0.abs();
    f.into_iter().map(|(t, v)| (t, v / scale)).collect()
}

/// SNR at iteration `t`; a run that stopped early holds its last value.
fn snr_at(trace: &SolverTrace, t: usize) -> f64 {
    match trace.records.get(t) {
        Some(r) if r.iter == t => r.snr_db,
        _ => trace.record_at(t).or(trace.records.last()).map_or(f64::NAN, |r| r.snr_db),
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub config: ExperimentConfig,
    pub trials: TrialSet,
    pub cost: Vec<CostRow>,
    pub snr: Vec<SnrRow>,
    pub selections: Vec<Selection>,
}

/// Convergence run at a single rate: per-trial tuned PnP-ISTA (and, when
/// enabled, tuned LASSO and GAMP), aggregated per iteration.
pub fn run_convergence_experiment(config: &ExperimentConfig) -> Result<ConvergenceReport> {
    config.validate()?;
    if !config.enabled(SolverKind::Pnp) {
        return Err(Error::config("the convergence experiment needs pnp in the solver set"));
    }
    if config.measurement_rates.len() != 1 {
        return Err(Error::config(format!(
            "the convergence experiment takes exactly one measurement rate, got {}",
            config.measurement_rates.len()
        )));
    }
    let trials = run_trials(config, true)?;

    let mut by_iter: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &trials.results {
        if let Some(p) = &r.pnp {
            for (t, v) in normalized_cost(&p.trace) {
                by_iter.entry(t).or_default().push(v);
            }
        }
    }
    let cost = by_iter
        .into_iter()
        .filter_map(|(iter, v)| Stats::of(&v).map(|f_norm| CostRow { iter, f_norm }))
        .collect();

    let mut snr = Vec::new();
    for iter in 0..=config.max_iter {
        for solver in SolverKind::ALL.into_iter().filter(|s| config.enabled(*s)) {
            let values: Vec<f64> = trials
                .results
                .iter()
                .filter_map(|r| r.trace(solver))
                .map(|tr| snr_at(tr, iter))
                .collect();
            if let Some(stats) = Stats::of(&values) {
                snr.push(SnrRow { iter, solver, snr: stats });
            }
        }
    }

    Ok(ConvergenceReport {
        config: config.clone(),
        selections: selections(config, &trials.results),
        trials,
        cost,
        snr,
    })
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub trials: TrialSet,
    pub rows: Vec<SweepRow>,
    pub selections: Vec<Selection>,
}

impl SweepReport {
    /// Mean final SNR per rate for one solver, in rate order.
    pub fn means(&self, solver: SolverKind) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|r| r.solver == solver).map(|r| (r.rate, r.snr.mean)).collect()
    }
}

/// Final SNR of every enabled solver across the configured rates.
pub fn run_rate_sweep(config: &ExperimentConfig) -> Result<SweepReport> {
    config.validate()?;
    if config.measurement_rates.len() < 2 {
        return Err(Error::config("the rate sweep needs at least two measurement rates"));
    }
    let trials = run_trials(config, false)?;
    let mut rows = Vec::new();
    for (ri, &rate) in config.measurement_rates.iter().enumerate() {
        for solver in SolverKind::ALL.into_iter().filter(|s| config.enabled(*s)) {
            let values: Vec<f64> = trials
                .results
                .iter()
                .filter(|r| r.rate_index == ri)
                .filter_map(|r| r.trace(solver))
                .map(SolverTrace::final_snr)
                .collect();
            if let Some(snr) = Stats::of(&values) {
                rows.push(SweepRow { rate, solver, snr });
            }
        }
    }
    Ok(SweepReport {
        config: config.clone(),
        selections: selections(config, &trials.results),
        trials,
        rows,
    })
}

/// Shortest round-trip formatting, switching to exponent form for very
/// small or large magnitudes.
pub(crate) fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn create_writer(dir: &Path, name: &str) -> Result<(csv::Writer<fs::File>, PathBuf)> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    Ok((csv::Writer::from_path(&path)?, path))
}

fn write_selections(dir: &Path, rows: &[Selection]) -> Result<PathBuf> {
    let (mut w, path) = create_writer(dir, SELECTIONS_CSV)?;
    w.write_record(["rate", "trial", "solver", "param_name", "param_value"])?;
    for s in rows {
        w.write_record([num(s.rate), s.trial.to_string(), s.solver.to_string(), s.param_name.to_string(), num(s.param_value)])?;
    }
    w.flush()?;
    Ok(path)
}

/// Writes `convergence_cost.csv`, `convergence_snr.csv` and `selections.csv`.
pub fn write_convergence_csv(report: &ConvergenceReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let (mut w, cost_path) = create_writer(dir, CONVERGENCE_COST_CSV)?;
    w.write_record(["iter", "f_norm_mean", "f_norm_min", "f_norm_max"])?;
    for r in &report.cost {
        w.write_record([r.iter.to_string(), num(r.f_norm.mean), num(r.f_norm.min), num(r.f_norm.max)])?;
    }
    w.flush()?;

    let (mut w, snr_path) = create_writer(dir, CONVERGENCE_SNR_CSV)?;
    w.write_record(["iter", "solver", "snr_mean", "snr_min", "snr_max"])?;
    for r in &report.snr {
        w.write_record([r.iter.to_string(), r.solver.to_string(), num(r.snr.mean), num(r.snr.min), num(r.snr.max)])?;
    }
    w.flush()?;

    let sel_path = write_selections(dir, &report.selections)?;
    Ok(vec![cost_path, snr_path, sel_path])
}

/// Writes `rate_sweep.csv` and `selections.csv`.
pub fn write_sweep_csv(report: &SweepReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let (mut w, path) = create_writer(dir, RATE_SWEEP_CSV)?;
    w.write_record(["rate", "solver", "snr_mean", "snr_min", "snr_max"])?;
    for r in &report.rows {
        w.write_record([num(r.rate), r.solver.to_string(), num(r.snr.mean), num(r.snr.min), num(r.snr.max)])?;
    }
    w.flush()?;
    let sel_path = write_selections(dir, &report.selections)?;
    Ok(vec![path, sel_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            n: 48,
            trials: 3,
            max_iter: 30,
            measurement_rates: vec![0.75],
            sigma_grid: log_grid(0.05, 0.3, 3),
            lambda_grid: log_grid(1e-3, 1e-1, 3),
            threads: Some(1),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_grids() {
        let l = default_lambda_grid();
        assert_eq!(l.len(), 15);
        assert_eq!((l[0], l[14]), (1e-4, 1.0));
        let s = default_sigma_grid();
        assert_eq!(s.len(), 9);
        assert_eq!((s[0], s[8]), (0.01, 0.37));
        assert!(s.windows(2).all(|w| (w[1] / w[0] - s[1] / s[0]).abs() < 1e-12));
        assert_eq!(default_rates().len(), 9);
    }

    #[test]
    fn subseeds_separate_roles_and_trials() {
        let roles = [StreamRole::Signal, StreamRole::Matrix, StreamRole::Noise];
        let mut seen = std::collections::HashSet::new();
        for r in 0..4 {
            for t in 0..50 {
                for role in roles {
                    assert!(seen.insert(subseed(11, r, t, role)));
                }
            }
        }
        assert_ne!(subseed(1, 0, 0, StreamRole::Signal), subseed(2, 0, 0, StreamRole::Signal));
    }

    #[test]
    fn toml_overrides_and_rejects_unknown_keys() {
        let c = ExperimentConfig::default()
            .merge_toml("seed = 3\nn = 64\nsolvers = [\"gamp\"]\ngamma = 0.25\n[validation]\ntweedie = 1e-30\n")
            .unwrap();
        assert_eq!((c.seed, c.n), (3, 64));
        assert_eq!(c.solvers, vec![SolverKind::Gamp]);
        assert_eq!(c.gamma, GammaPolicy::Explicit(0.25));
        assert_eq!(c.validation.tweedie, 1e-30);
        assert_eq!(c.validation.inverse, 1e-9);
        let auto = c.merge_toml("gamma = \"auto\"").unwrap();
        assert_eq!(auto.gamma, GammaPolicy::Auto);
        assert!(matches!(ExperimentConfig::default().merge_toml("sed = 3"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::default().merge_toml("gamma = \"big\""), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = [
            ExperimentConfig { solvers: vec![], ..tiny() },
            ExperimentConfig { trials: 0, ..tiny() },
            ExperimentConfig { measurement_rates: vec![0.5, 0.3], ..tiny() },
            ExperimentConfig { measurement_rates: vec![1.2], ..tiny() },
            ExperimentConfig { sigma_grid: vec![], ..tiny() },
            ExperimentConfig { gamma: GammaPolicy::Explicit(-1.0), ..tiny() },
            ExperimentConfig { alpha: 0.0, ..tiny() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        // an empty lambda grid is fine when LASSO is off
        let c = ExperimentConfig {
            lambda_grid: vec![],
            solvers: vec![SolverKind::Pnp],
            ..tiny()
        };
        assert!(c.validate().is_ok());
        assert_eq!(parse_solver_list("").unwrap(), vec![]);
        assert_eq!(parse_solver_list("pnp, GAMP").unwrap(), vec![SolverKind::Pnp, SolverKind::Gamp]);
        assert!(parse_solver_list("pnp,admm").is_err());
    }

    #[test]
    fn instances_are_shared_and_reproducible() {
        let c = tiny();
        let a = trial_instance(&c, 0, 1).unwrap();
        let b = trial_instance(&c, 0, 1).unwrap();
        assert_eq!(a.y(), b.y());
        assert_eq!(a.operator().matrix(), b.operator().matrix());
        let other = trial_instance(&c, 0, 2).unwrap();
        assert_ne!(a.x_true(), other.x_true());
        assert_eq!(a.m(), 36);
    }

    #[test]
    fn stats_bounds() {
        let s = Stats::of(&[1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.min, s.max), (2.0, 1.0, 3.0));
        let same = Stats::of(&[0.1; 7]).unwrap();
        assert!(same.min <= same.mean && same.mean <= same.max);
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn convergence_report_shape() {
        let c = tiny();
        let rep = run_convergence_experiment(&c).unwrap();
        assert_eq!(rep.trials.results.len(), 3);
        assert_eq!(rep.cost.len(), 31);
        assert_eq!(rep.cost[0].f_norm.mean, 1.0);
        assert_eq!(rep.snr.len(), 31 * 3);
        assert_eq!(rep.selections.len(), 6);
        for r in &rep.trials.results {
            let p = r.pnp.as_ref().unwrap();
            assert!(c.sigma_grid.contains(&p.sigma));
            let f = normalized_cost(&p.trace);
            assert!(f.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-9));
        }
        let single_thread = rep.snr.clone();
        let pooled = run_convergence_experiment(&ExperimentConfig { threads: Some(3), ..c.clone() }).unwrap();
        assert_eq!(pooled.snr, single_thread);
    }

    #[test]
    fn convergence_preconditions() {
        let two_rates = ExperimentConfig {
            measurement_rates: vec![0.5, 0.8],
            ..tiny()
        };
        assert!(matches!(run_convergence_experiment(&two_rates), Err(Error::Config(_))));
        let no_pnp = ExperimentConfig {
            solvers: vec![SolverKind::Gamp],
            ..tiny()
        };
        assert!(matches!(run_convergence_experiment(&no_pnp), Err(Error::Config(_))));
        assert!(matches!(run_rate_sweep(&tiny()), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_rows_follow_rates_and_solvers() {
        let c = ExperimentConfig {
            measurement_rates: vec![0.4, 0.9],
            solvers: vec![SolverKind::Gamp, SolverKind::Pnp],
            trials: 2,
            ..tiny()
        };
        let rep = run_rate_sweep(&c).unwrap();
        let keys: Vec<(f64, SolverKind)> = rep.rows.iter().map(|r| (r.rate, r.solver)).collect();
        assert_eq!(
            keys,
            vec![(0.4, SolverKind::Pnp), (0.4, SolverKind::Gamp), (0.9, SolverKind::Pnp), (0.9, SolverKind::Gamp)]
        );
        assert_eq!(rep.selections.len(), 4);
        assert!(rep.rows.iter().all(|r| r.snr.min <= r.snr.mean && r.snr.mean <= r.snr.max));
    }

    #[test]
    fn csv_headers() {
        let dir = tempfile::tempdir().unwrap();
        let rep = run_convergence_experiment(&ExperimentConfig { trials: 1, ..tiny() }).unwrap();
        write_convergence_csv(&rep, dir.path()).unwrap();
        let head = |name: &str| fs::read_to_string(dir.path().join(name)).unwrap().lines().next().unwrap().to_string();
        assert_eq!(head(CONVERGENCE_COST_CSV), "iter,f_norm_mean,f_norm_min,f_norm_max");
        assert_eq!(head(CONVERGENCE_SNR_CSV), "iter,solver,snr_mean,snr_min,snr_max");
        assert_eq!(head(SELECTIONS_CSV), "rate,trial,solver,param_name,param_value");
        let cost = fs::read_to_string(dir.path().join(CONVERGENCE_COST_CSV)).unwrap();
        assert_eq!(cost.lines().nth(1).unwrap(), "0,1,1,1");
    }
}
