use ndarray::{Array1, ArrayView1};

use super::{check_common, IterRecord, SolverTrace, StopReason};
use crate::denoiser::{MmseDenoiser, RegularizerContext};
use crate::error::{Error, Result};
use crate::linear_model::{norm, snr_db, ProblemInstance};

/// Rounding slack when comparing a step size against `1/L̂`.
pub(super) const STEP_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    /// Record `f` and `‖∇f‖` every `interval` iterations (and at the last one).
    pub interval: usize,
    /// When false only the SNR is recorded, which skips the per-coordinate inversions.
    pub objective: bool,
    /// Stop once `‖∇f(xᵗ)‖ / ‖∇f(x¹)‖` falls below this value.
    pub grad_tol: Option<f64>,
    /// Accept `γ > 1/L̂`; the trace is then not guaranteed to be monotone.
    pub allow_large_step: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            interval: 1,
            objective: true,
            grad_tol: None,
            allow_large_step: false,
        }
    }
}

impl TraceOptions {
    pub fn snr_only() -> Self {
        Self {
            objective: false,
            ..Self::default()
        }
    }
}

/// PnP-ISTA: `zᵗ = xᵗ⁻¹ − γ∇g(xᵗ⁻¹)`, `xᵗ = D_σ(zᵗ)`, from `x⁰ = 0`.
///
/// Traced objective is `f = g + h` with `h` the regularizer induced by
/// `(denoiser, γ)`; its gradient norm is `‖∇g(x) + (D⁻¹(x) − x)/γ‖`.
pub fn pnp_ista(
    problem: &ProblemInstance,
    denoiser: &MmseDenoiser,
    gamma: f64,
    max_iter: usize,
    options: TraceOptions,
) -> Result<SolverTrace> {
    let lipschitz = check_common(problem, gamma, max_iter)?;
    let within_bound = gamma * lipschitz <= 1.0 + STEP_SLACK;
    if !within_bound && !options.allow_large_step {
        return Err(Error::invalid(format!(
            "step size {gamma} exceeds 1/L̂ = {}",
            1.0 / lipschitz
        )));
    }
    if options.interval == 0 {
        return Err(Error::invalid("trace interval must be at least 1"));
    }
    let ctx = RegularizerContext::new(*denoiser, gamma)?;
    let x_true = problem.x_true().view();

    let mut x = Array1::zeros(problem.n());
    let (mut g, mut grad_g) = problem.fidelity_and_grad(x.view())?;
    let mut records = Vec::with_capacity(max_iter + 1);
    let traced = |t: usize| options.objective && (t % options.interval == 0 || t == max_iter);

    let observe = |t: usize, x: &Array1<f64>, g: f64, grad_g: &Array1<f64>| -> Result<IterRecord> {
        let (objective, grad_norm) = if traced(t) {
            let (h, grad_h) = ctx.value_and_grad(x.view())?;
            (Some(g + h), Some(norm((grad_h + grad_g).view())))
        } else {
            (None, None)
        };
        Ok(IterRecord {
            iter: t,
            objective,
            grad_norm,
            snr_db: snr_db(x.view(), x_true)?,
        })
    };

    records.push(observe(0, &x, g, &grad_g)?);
    let mut first_grad = None;
    let mut stop = StopReason::MaxIter;
    let mut iterations_run = max_iter;
    for t in 1..=max_iter {
        let z = &x - &(gamma * &grad_g);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(t, "gradient step produced a non-finite value"));
        }
        x = denoiser.denoise_vector(z.view())?;
        (g, grad_g) = problem.fidelity_and_grad(x.view())?;
        if !g.is_finite() {
            return Err(Error::numerical(t, "data fidelity is not finite"));
        }
        let rec = observe(t, &x, g, &grad_g)?;
        records.push(rec);

        if let (Some(tol), Some(gn)) = (options.grad_tol, rec.grad_norm) {
            let base = *first_grad.get_or_insert(gn);
            if gn <= tol * base {
                stop = StopReason::GradientTolerance;
                iterations_run = t;
                break;
            }
        }
    }

    Ok(SolverTrace {
        records,
        final_iterate: x,
        iterations_run,
        stop,
        monotone_guaranteed: within_bound,
    })
}

/// `‖x − D_σ(x − γ∇g(x))‖`, zero exactly at PnP-ISTA fixed points.
pub fn fixed_point_residual(
    problem: &ProblemInstance,
    denoiser: &MmseDenoiser,
    gamma: f64,
    x: ArrayView1<f64>,
) -> Result<f64> {
    let grad = problem.grad_data_fidelity(x)?;
    let z = &x - &(gamma * &grad);
    let next = denoiser.denoise_vector(z.view())?;
    Ok(norm((&x - &next).view()))
}

/// Majorizer of `f = g + h` at `s`:
/// `μ(x, s) = g(s) + ∇g(s)ᵀ(x − s) + ‖x − s‖²/(2γ) + h(x)`.
///
/// Used by the verification suites; requires `γ ≤ 1/L̂`.
pub fn mm_surrogate_value(
    problem: &ProblemInstance,
    ctx: &RegularizerContext,
    x: ArrayView1<f64>,
    s: ArrayView1<f64>,
) -> Result<f64> {
    let lipschitz = problem.lipschitz()?.value;
    if ctx.gamma() * lipschitz > 1.0 + STEP_SLACK {
        return Err(Error::invalid("surrogate needs γ ≤ 1/L̂"));
    }
    let (g_s, grad_s) = problem.fidelity_and_grad(s)?;
    let d = &x - &s;
    Ok(g_s + grad_s.dot(&d) + d.dot(&d) / (2.0 * ctx.gamma()) + ctx.regularizer_h(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_model::MeasurementOperator;
    use crate::prior::BernoulliGaussianPrior;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_problem(seed: u64, m: usize, n: usize, alpha: f64) -> (ProblemInstance, BernoulliGaussianPrior) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = BernoulliGaussianPrior::new(alpha).unwrap();
        let mut x = prior.sample_signal(n, &mut rng).unwrap();
        if x.iter().all(|v| *v == 0.0) {
            x[0] = 1.0;
        }
        let h = MeasurementOperator::gaussian(m, n, &mut rng).unwrap();
        (ProblemInstance::at_input_snr(h, x, 20.0, &mut rng).unwrap(), prior)
    }

    #[test]
    fn identity_operator_single_step_is_mmse_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior = BernoulliGaussianPrior::new(0.3).unwrap();
        let x = prior.sample_signal(32, &mut rng).unwrap();
        let p = ProblemInstance::with_noise(MeasurementOperator::identity(32).unwrap(), x.clone(), 0.0, &mut rng).unwrap();
        let d = MmseDenoiser::new(prior, 0.2).unwrap();
        let trace = pnp_ista(&p, &d, 1.0, 1, TraceOptions::default()).unwrap();
        assert_eq!(trace.final_iterate, d.denoise_vector(x.view()).unwrap());
        assert_eq!(trace.records.len(), 2);
    }

    #[test]
    fn rejects_oversized_step_unless_allowed() {
        let (p, prior) = small_problem(2, 24, 32, 0.2);
        let d = MmseDenoiser::new(prior, 0.1).unwrap();
        let l = p.lipschitz().unwrap().value;
        assert!(pnp_ista(&p, &d, 1.5 / l, 5, TraceOptions::default()).is_err());
        let opts = TraceOptions {
            allow_large_step: true,
            ..TraceOptions::default()
        };
        let trace = pnp_ista(&p, &d, 1.5 / l, 5, opts).unwrap();
        assert!(!trace.monotone_guaranteed);
        assert!(pnp_ista(&p, &d, 0.0, 5, TraceOptions::default()).is_err());
        assert!(pnp_ista(&p, &d, 0.5 / l, 0, TraceOptions::default()).is_err());
    }

    #[test]
    fn objective_descends_and_gradient_vanishes() {
        let (p, prior) = small_problem(3, 48, 64, 0.2);
        let d = MmseDenoiser::new(prior, 0.1).unwrap();
        let gamma = p.lipschitz().unwrap().default_step();
        let trace = pnp_ista(&p, &d, gamma, 400, TraceOptions::default()).unwrap();
        assert!(trace.monotone_guaranteed);
        assert_eq!(trace.first_monotonicity_violation(1e-9), None);
        let g = trace.grad_norms();
        assert!(g.last().unwrap().1 < 1e-3 * g[1].1);
        let x = &trace.final_iterate;
        let res = fixed_point_residual(&p, &d, gamma, x.view()).unwrap();
        assert!(res <= 1e-6 * norm(x.view()), "{res}");
    }

    #[test]
    fn gradient_tolerance_stops_early() {
        let (p, prior) = small_problem(4, 48, 64, 0.2);
        let d = MmseDenoiser::new(prior, 0.1).unwrap();
        let gamma = p.lipschitz().unwrap().default_step();
        let opts = TraceOptions {
            grad_tol: Some(1e-4),
            ..TraceOptions::default()
        };
        let trace = pnp_ista(&p, &d, gamma, 5000, opts).unwrap();
        assert_eq!(trace.stop, StopReason::GradientTolerance);
        assert!(trace.iterations_run < 5000);
        assert_eq!(trace.records.last().unwrap().iter, trace.iterations_run);
    }

    #[test]
    fn trace_interval_thins_objective_records() {
        let (p, prior) = small_problem(5, 20, 30, 0.3);
        let d = MmseDenoiser::new(prior, 0.2).unwrap();
        let gamma = p.lipschitz().unwrap().default_step();
        let opts = TraceOptions {
            interval: 4,
            ..TraceOptions::default()
        };
        let trace = pnp_ista(&p, &d, gamma, 10, opts).unwrap();
        let iters: Vec<usize> = trace.objectives().iter().map(|(t, _)| *t).collect();
        assert_eq!(iters, vec![0, 4, 8, 10]);
        assert_eq!(trace.records.len(), 11);
        let snr_only = pnp_ista(&p, &d, gamma, 10, TraceOptions::snr_only()).unwrap();
        assert!(snr_only.objectives().is_empty());
        assert_eq!(snr_only.final_iterate, trace.final_iterate);
    }

    #[test]
    fn surrogate_touches_and_majorizes() {
        let (p, prior) = small_problem(6, 6, 8, 0.4);
        let d = MmseDenoiser::new(prior, 0.3).unwrap();
        let gamma = p.lipschitz().unwrap().default_step();
        let ctx = RegularizerContext::new(d, gamma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = prior.sample_signal(8, &mut rng).unwrap();
            let s = prior.sample_signal(8, &mut rng).unwrap();
            let f = |v: ArrayView1<f64>| p.data_fidelity(v).unwrap() + ctx.regularizer_h(v).unwrap();
            assert_relative_eq!(mm_surrogate_value(&p, &ctx, s.view(), s.view()).unwrap(), f(s.view()), max_relative = 1e-10);
            assert!(mm_surrogate_value(&p, &ctx, x.view(), s.view()).unwrap() >= f(x.view()) - 1e-9);
        }
    }
}
