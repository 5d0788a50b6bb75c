//! Small-scale invariant checks behind the `validate` subcommand.
//!
//! Each check compares an analytic quantity with an independent evaluation
//! (finite differences, grid search, the other side of an identity) and
//! reports its worst discrepancy against a configured tolerance.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{MmseDenoiser, RegularizerContext};
use crate::error::Result;
use crate::experiment::{num, ExperimentConfig, GammaPolicy};
use crate::linear_model::{MeasurementOperator, ProblemInstance};
use crate::prior::BernoulliGaussianPrior;
use crate::solvers::{gamp_with_state, mm_surrogate_value, pnp_ista, TraceOptions};

pub const VALIDATION_CSV: &str = "validation.csv";

const FD_STEP: f64 = 1e-5;
const PROX_DRAWS: usize = 20;
const PROX_PERTURBATIONS: usize = 50;
const PROX_COARSE_STEP: f64 = 1e-3;
const PROX_FINE_STEP: f64 = 1e-4;
const GRADIENT_POINTS: usize = 10;
const TRAJECTORY_ITERS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "SKIPPED",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    /// Worst observed discrepancy (NaN when skipped).
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn measured(name: &'static str, worst: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        let status = if worst < tolerance { CheckStatus::Pass } else { CheckStatus::Fail };
        Self {
            name,
            status,
            worst,
            tolerance,
            detail: detail.into(),
        }
    }

    fn passed(name: &'static str, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            status: CheckStatus::Pass,
            worst: 0.0,
            tolerance,
            detail: detail.into(),
        }
    }

    fn failed(name: &'static str, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            status: CheckStatus::Fail,
            worst: f64::NAN,
            tolerance,
            detail: detail.into(),
        }
    }

    fn skipped(name: &'static str, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            status: CheckStatus::Skipped,
            worst: f64::NAN,
            tolerance,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    /// True when no check failed; skipped checks do not count against it.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:<8} {:>12} {:>12}  detail\n", "check", "status", "worst", "tolerance");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<22} {:<8} {:>12.3e} {:>12.3e}  {}\n",
                c.name,
                c.status.to_string(),
                c.worst,
                c.tolerance,
                c.detail
            ));
        }
        out
    }

    /// Writes `validation.csv` with header `check,status,worst,tolerance`.
    pub fn write_csv(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(VALIDATION_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["check", "status", "worst", "tolerance"])?;
        for c in &self.checks {
            w.write_record([c.name.to_string(), c.status.to_string(), num(c.worst), num(c.tolerance)])?;
        }
        w.flush()?;
        Ok(path)
    }
}

/// Prior/noise settings exercised by the scalar checks.
pub fn scalar_settings(alpha: f64) -> Result<Vec<MmseDenoiser>> {
    Ok(vec![
        MmseDenoiser::new(BernoulliGaussianPrior::new(alpha)?, 0.5)?,
        MmseDenoiser::new(BernoulliGaussianPrior::new(0.05)?, 0.05)?,
        MmseDenoiser::new(BernoulliGaussianPrior::with_sigma_x(0.5, 1.0)?, 1.0)?,
        MmseDenoiser::new(BernoulliGaussianPrior::with_sigma_x(0.3, 0.7)?, 0.2)?,
        MmseDenoiser::new(BernoulliGaussianPrior::new(0.9)?, 0.1)?,
    ])
}

/// `count` evenly spaced points over `[−10(σ_x+σ), 10(σ_x+σ)]`.
pub fn scalar_grid(d: &MmseDenoiser, count: usize) -> Vec<f64> {
    let r = 10.0 * (d.prior().sigma_x() + d.sigma());
    (0..count).map(|i| -r + 2.0 * r * i as f64 / (count - 1) as f64).collect()
}

fn tweedie(settings: &[MmseDenoiser], tol: f64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for d in settings {
        for z in scalar_grid(d, 201) {
            worst = worst.max(d.tweedie_residual(z)?.abs() / z.abs().max(1.0));
        }
    }
    Ok(CheckResult::measured("tweedie", worst, tol, format!("{} settings x 201 points", settings.len())))
}

fn derivative_identity(settings: &[MmseDenoiser], tol: f64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut positive = true;
    for d in settings {
        let s2 = d.sigma() * d.sigma();
        for z in scalar_grid(d, 201) {
            let dp = d.denoiser_derivative(z)?;
            positive &= dp > 0.0;
            worst = worst.max((dp - d.posterior_variance_scalar(z)? / s2).abs());
        }
    }
    if !positive {
        return Ok(CheckResult::failed("derivative_identity", tol, "D' is not positive everywhere"));
    }
    Ok(CheckResult::measured("derivative_identity", worst, tol, "D' = Var/sigma^2, D' > 0"))
}

fn derivative_fd(settings: &[MmseDenoiser], tol: f64) -> Result<CheckResult> {
    // tiny σ makes D''' of order σ⁻³, beyond what a 1e-5 central difference resolves
    let mut worst = 0.0f64;
    for d in settings.iter().filter(|d| d.sigma() >= 0.2) {
        for z in scalar_grid(d, 101) {
            let fd = (d.denoise_scalar(z + FD_STEP)? - d.denoise_scalar(z - FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max((fd - d.denoiser_derivative(z)?).abs());
        }
    }
    Ok(CheckResult::measured("derivative_fd", worst, tol, "central difference, sigma >= 0.2"))
}

fn inverse_round_trip(settings: &[MmseDenoiser], tol: f64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for d in settings {
        for z in scalar_grid(d, 101) {
            let x = d.denoise_scalar(z)?;
            let back = d.invert_scalar(x)?;
            worst = worst.max((back - z).abs() / z.abs().max(1.0));
            let again = d.denoise_scalar(back)?;
            worst = worst.max((again - x).abs() / x.abs().max(1.0));
        }
    }
    Ok(CheckResult::measured("inverse_round_trip", worst, tol, "D^-1(D(z)) and D(D^-1(x))"))
}

/// Global minimizer of `v ↦ ½(v−z)² + γh(v)` by a coarse-to-fine grid search.
pub fn prox_grid_minimizer(ctx: &RegularizerContext, z: f64, coarse: f64, fine: f64) -> Result<f64> {
    let objective = |v: f64| -> Result<f64> { Ok(0.5 * (v - z) * (v - z) + ctx.gamma() * ctx.regularizer_h(Array1::from_elem(1, v).view())?) };
    let scan = |lo: f64, hi: f64, step: f64| -> Result<f64> {
        let count = ((hi - lo) / step).ceil() as usize;
        let mut best = (f64::INFINITY, lo);
        for i in 0..=count {
            let v = lo + step * i as f64;
            let f = objective(v)?;
            if f < best.0 {
                best = (f, v);
            }
        }
        Ok(best.1)
    };
    let r = z.abs() + 1.0;
    let rough = scan(-r, r, coarse)?;
    scan(rough - 2.0 * coarse, rough + 2.0 * coarse, fine)
}

fn prox(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut worst = 0.0f64;
    for _ in 0..PROX_DRAWS {
        let prior = BernoulliGaussianPrior::new(rng.gen_range(0.1..0.9))?;
        let d = MmseDenoiser::new(prior, rng.gen_range(0.1..1.0))?;
        let ctx = RegularizerContext::new(d, rng.gen_range(0.1..2.0))?;
        let z: f64 = rng.gen_range(-3.0..3.0);
        let at_z = ctx.prox_oracle_phi(z, z)?;
        for _ in 0..PROX_PERTURBATIONS {
            let mag: f64 = 10f64.powf(rng.gen_range(-3.0..0.0));
            let u = if rng.gen_bool(0.5) { z + mag } else { z - mag };
            if !(at_z < ctx.prox_oracle_phi(u, z)?) {
                violations += 1;
            }
        }
        let v = prox_grid_minimizer(&ctx, z, PROX_COARSE_STEP, PROX_FINE_STEP)?;
        worst = worst.max((v - d.denoise_scalar(z)?).abs());
    }
    if violations > 0 {
        return Ok(CheckResult::failed("prox", PROX_FINE_STEP, format!("{violations} perturbations beat u = z")));
    }
    Ok(CheckResult::measured(
        "prox",
        worst,
        PROX_FINE_STEP * (1.0 + 1e-9),
        format!("{PROX_DRAWS} draws; grid minimizer vs D(z)"),
    ))
}

fn small_problem(seed: u64, alpha: f64, m: usize, n: usize) -> Result<ProblemInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = BernoulliGaussianPrior::new(alpha)?;
    let mut x = prior.sample_signal(n, &mut rng)?;
    if x.iter().all(|v| *v == 0.0) {
        x[0] = 1.0;
    }
    let h = MeasurementOperator::gaussian(m, n, &mut rng)?;
    ProblemInstance::at_input_snr(h, x, 20.0, &mut rng)
}

fn relative_gap(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    diff / b.mapv(|v| v * v).sum().sqrt().max(1e-12)
}

fn gradients(seed: u64, alpha: f64, tol: f64) -> Result<CheckResult> {
    let n = 8;
    let p = small_problem(seed, alpha, 6, n)?;
    let prior = BernoulliGaussianPrior::new(alpha)?;
    let ctx = RegularizerContext::new(MmseDenoiser::new(prior, 0.3)?, p.lipschitz()?.default_step())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let mut worst = 0.0f64;
    for _ in 0..GRADIENT_POINTS {
        let x = Array1::from_shape_fn(n, |_| rng.gen_range(-2.0..2.0));
        let fd = |f: &dyn Fn(&Array1<f64>) -> Result<f64>| -> Result<Array1<f64>> {
            let mut out = Array1::zeros(n);
            for i in 0..n {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[i] += FD_STEP;
                b[i] -= FD_STEP;
                out[i] = (f(&a)? - f(&b)?) / (2.0 * FD_STEP);
            }
            Ok(out)
        };
        let g_fd = fd(&|v| p.data_fidelity(v.view()))?;
        worst = worst.max(relative_gap(&g_fd, &p.grad_data_fidelity(x.view())?));
        let h_fd = fd(&|v| ctx.regularizer_h(v.view()))?;
        worst = worst.max(relative_gap(&h_fd, &ctx.regularizer_grad(x.view())?));
    }
    Ok(CheckResult::measured("gradient_fd", worst, tol, "grad g and grad h vs central differences"))
}

/// Objective trace and MM sandwich along a PnP trajectory; both are only
/// guaranteed for `γ ≤ 1/L̂`.
fn trajectory(seed: u64, alpha: f64, policy: GammaPolicy, mm_tol: f64, mono_tol: f64) -> Result<Vec<CheckResult>> {
    let p = small_problem(seed, alpha, 48, 64)?;
    let lipschitz = p.lipschitz()?;
    let gamma = policy.resolve(&lipschitz);
    if gamma * lipschitz.value > 1.0 {
        let why = format!("gamma = {gamma} exceeds 1/L = {}", 1.0 / lipschitz.value);
        return Ok(vec![
            CheckResult::skipped("pnp_monotonicity", mono_tol, why.clone()),
            CheckResult::skipped("mm_sandwich", mm_tol, why),
        ]);
    }
    let d = MmseDenoiser::new(BernoulliGaussianPrior::new(alpha)?, 0.1)?;
    let ctx = RegularizerContext::new(d, gamma)?;
    let opts = TraceOptions::default();
    let trace = pnp_ista(&p, &d, gamma, TRAJECTORY_ITERS, opts)?;
    let mono = match trace.first_monotonicity_violation(mono_tol) {
        None => CheckResult::passed("pnp_monotonicity", mono_tol, format!("{TRAJECTORY_ITERS} iterations")),
        Some((t, inc)) => CheckResult::failed("pnp_monotonicity", mono_tol, format!("f increased by {inc:e} at t = {t}")),
    };

    // replay the iterates to evaluate the surrogate between consecutive ones
    let mut worst = 0.0f64;
    let mut prev = Array1::<f64>::zeros(p.n());
    let f = |x: &Array1<f64>| -> Result<f64> { Ok(p.data_fidelity(x.view())? + ctx.regularizer_h(x.view())?) };
    for _ in 0..TRAJECTORY_ITERS {
        let z = &prev - &(gamma * &p.grad_data_fidelity(prev.view())?);
        let next = d.denoise_vector(z.view())?;
        let (f_next, f_prev) = (f(&next)?, f(&prev)?);
        let mu = mm_surrogate_value(&p, &ctx, next.view(), prev.view())?;
        let scale = f_prev.abs().max(1.0);
        worst = worst.max((f_next - mu) / scale).max((mu - f_prev) / scale);
        prev = next;
    }
    let mm = CheckResult::measured("mm_sandwich", worst.max(0.0), mm_tol, "f(x_t) <= mu(x_t, x_t-1) <= f(x_t-1)");
    Ok(vec![mono, mm])
}

fn gamp_variances(seed: u64, alpha: f64, damping: f64) -> Result<CheckResult> {
    let p = small_problem(seed, alpha, 48, 64)?;
    let prior = BernoulliGaussianPrior::new(alpha)?;
    match gamp_with_state(&p, &prior, 50, damping) {
        Ok((_, st)) => {
            let ok = [&st.tau_x, &st.v_p, &st.v_r].iter().all(|v| v.iter().all(|x| *x > 0.0 && x.is_finite()));
            Ok(if ok {
                CheckResult::passed("gamp_variances", 0.0, "all variances positive")
            } else {
                CheckResult::failed("gamp_variances", 0.0, "non-positive variance in final state")
            })
        }
        Err(e) => Ok(CheckResult::failed("gamp_variances", 0.0, e.to_string())),
    }
}

/// Runs every check at small scale with seeds derived from `config.seed`.
pub fn run_validation_suite(config: &ExperimentConfig) -> Result<ValidationReport> {
    config.validate()?;
    let tol = &config.validation;
    let settings = scalar_settings(config.alpha)?;
    let mut checks = vec![
        tweedie(&settings, tol.tweedie)?,
        derivative_identity(&settings, tol.derivative_identity)?,
        derivative_fd(&settings, tol.derivative_fd)?,
        inverse_round_trip(&settings, tol.inverse)?,
        prox(config.seed)?,
        gradients(config.seed, config.alpha, tol.gradient_fd)?,
    ];
    checks.extend(trajectory(config.seed, config.alpha, config.gamma, tol.mm_sandwich, tol.monotonicity)?);
    checks.push(gamp_variances(config.seed, config.alpha, config.gamp_damping)?);
    Ok(ValidationReport { checks })
}
