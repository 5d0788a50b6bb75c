use ndarray::Array1;

use super::pnp::STEP_SLACK;
use super::{check_common, IterRecord, SolverTrace, StopReason};
use crate::error::{Error, Result};
use crate::linear_model::{snr_db, ProblemInstance};

/// Proximal map of `τ|·|`: `sign(z)·max(|z| − τ, 0)`.
#[inline]
pub fn soft_threshold(z: f64, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    if z > tau {
        z - tau
    } else if z < -tau {
        z + tau
    } else {
        0.0
    }
}

/// ISTA on `g(x) + λ‖x‖₁` with threshold `γλ`, from `x⁰ = 0`.
pub fn lasso_ista(problem: &ProblemInstance, lambda: f64, gamma: f64, max_iter: usize) -> Result<SolverTrace> {
    let lipschitz = check_common(problem, gamma, max_iter)?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    if gamma * lipschitz > 1.0 + STEP_SLACK {
        return Err(Error::invalid(format!("step size {gamma} exceeds 1/L̂ = {}", 1.0 / lipschitz)));
    }
    let x_true = problem.x_true().view();
    let tau = gamma * lambda;

    let mut x = Array1::zeros(problem.n());
    let (mut g, mut grad) = problem.fidelity_and_grad(x.view())?;
    let mut records = Vec::with_capacity(max_iter + 1);
    let objective = |g: f64, x: &Array1<f64>| g + lambda * x.iter().map(|v| v.abs()).sum::<f64>();
    records.push(IterRecord {
        iter: 0,
        objective: Some(objective(g, &x)),
        grad_norm: None,
        snr_db: snr_db(x.view(), x_true)?,
    });
    for t in 1..=max_iter {
        x.zip_mut_with(&grad, |xi, &gi| *xi = soft_threshold(*xi - gamma * gi, tau));
        (g, grad) = problem.fidelity_and_grad(x.view())?;
        if !g.is_finite() {
            return Err(Error::numerical(t, "LASSO iterate is not finite"));
        }
        records.push(IterRecord {
            iter: t,
            objective: Some(objective(g, &x)),
            grad_norm: None,
            snr_db: snr_db(x.view(), x_true)?,
        });
    }

    Ok(SolverTrace {
        records,
        final_iterate: x,
        iterations_run: max_iter,
        stop: StopReason::MaxIter,
        monotone_guaranteed: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_model::MeasurementOperator;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_threshold_values() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-2.5, 1.0), -1.5);
        assert_eq!(soft_threshold(0.7, 0.0), 0.7);
    }

    #[test]
    fn soft_threshold_is_grid_prox() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        use rand::Rng;
        for _ in 0..50 {
            let z: f64 = rng.gen_range(-3.0..3.0);
            let tau: f64 = rng.gen_range(0.0..2.0);
            let step = 1e-4;
            let best = (0..=80_000)
                .map(|i| -4.0 + step * i as f64)
                .map(|v| (v, 0.5 * (v - z) * (v - z) + tau * v.abs()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            assert!((best - soft_threshold(z, tau)).abs() <= step, "z={z} tau={tau}");
        }
    }

    fn problem(seed: u64) -> ProblemInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = MeasurementOperator::gaussian(30, 40, &mut rng).unwrap();
        let mut x = Array1::zeros(40);
        x[3] = 1.5;
        x[17] = -2.0;
        x[31] = 0.8;
        ProblemInstance::with_noise(h, x, 0.05, &mut rng).unwrap()
    }

    #[test]
    fn huge_lambda_returns_zero() {
        let p = problem(1);
        let gamma = p.lipschitz().unwrap().default_step();
        let lmax = p.operator().apply_adjoint(p.y().view()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let trace = lasso_ista(&p, 1.01 * lmax, gamma, 50).unwrap();
        assert!(trace.final_iterate.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn objective_is_monotone() {
        let p = problem(2);
        let gamma = p.lipschitz().unwrap().default_step();
        let trace = lasso_ista(&p, 0.05, gamma, 300).unwrap();
        assert_eq!(trace.first_monotonicity_violation(1e-12), None);
        assert!(trace.final_snr() > 10.0);
    }

    #[test]
    fn argument_checks() {
        let p = problem(3);
        let gamma = p.lipschitz().unwrap().default_step();
        assert!(lasso_ista(&p, 0.0, gamma, 10).is_err());
        assert!(lasso_ista(&p, 0.1, 2.0 * gamma, 10).is_err());
        assert!(lasso_ista(&p, 0.1, gamma, 0).is_err());
    }
}
