use ndarray::{Array1, Array2, Zip};

use super::{IterRecord, SolverTrace, StopReason};
use crate::denoiser::MmseDenoiser;
use crate::error::{Error, Result};
use crate::linear_model::{snr_db, transpose_product, ProblemInstance};
use crate::prior::BernoulliGaussianPrior;

pub const DEFAULT_DAMPING: f64 = 0.9;

/// GAMP stops early once its SNR falls this far below the best seen so far.
pub const DIVERGENCE_DROP_DB: f64 = 20.0;

/// Internal GAMP state after the last completed iteration.
#[derive(Debug, Clone)]
pub struct GampState {
    pub x_hat: Array1<f64>,
    /// Posterior variance of each `x_hat` component.
    pub tau_x: Array1<f64>,
    /// Output-side dual vector.
    pub s: Array1<f64>,
    pub p: Array1<f64>,
    pub v_p: Array1<f64>,
    /// Effective scalar-channel observations and their noise variances.
    pub r: Array1<f64>,
    pub v_r: Array1<f64>,
}

impl GampState {
    fn initial(prior: &BernoulliGaussianPrior, m: usize, n: usize) -> Self {
        Self {
            x_hat: Array1::zeros(n),
            tau_x: Array1::from_elem(n, prior.variance()),
            s: Array1::zeros(m),
            p: Array1::zeros(m),
            v_p: Array1::zeros(m),
            r: Array1::zeros(n),
            v_r: Array1::zeros(n),
        }
    }
}

fn check_variances(name: &str, v: &Array1<f64>, iteration: usize) -> Result<()> {
    match v.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
        Some(bad) => Err(Error::numerical(iteration, format!("{name} variance became {bad}"))),
        None => Ok(()),
    }
}

/// MMSE-GAMP for the AWGN output channel with the Bernoulli-Gaussian input
/// channel, using full per-component variances.
///
/// `damping` weights the new `(x_hat, s)` against the previous ones; `1.0`
/// disables damping.
pub fn gamp(problem: &ProblemInstance, prior: &BernoulliGaussianPrior, max_iter: usize, damping: f64) -> Result<SolverTrace> {
    gamp_with_state(problem, prior, max_iter, damping).map(|(trace, _)| trace)
}

pub fn gamp_with_state(
    problem: &ProblemInstance,
    prior: &BernoulliGaussianPrior,
    max_iter: usize,
    damping: f64,
) -> Result<(SolverTrace, GampState)> {
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::invalid(format!("damping must lie in (0, 1], got {damping}")));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    let h = problem.operator();
    let h_sq: Array2<f64> = h.matrix().mapv(|v| v * v);
    let noise_var = problem.sigma_e() * problem.sigma_e();
    let y = problem.y();
    let x_true = problem.x_true().view();

    let mut st = GampState::initial(prior, problem.m(), problem.n());
    let mut records = Vec::with_capacity(max_iter + 1);
    records.push(IterRecord {
        iter: 0,
        objective: None,
        grad_norm: None,
        snr_db: snr_db(st.x_hat.view(), x_true)?,
    });
    let mut best_snr = f64::NEG_INFINITY;
    let mut stop = StopReason::MaxIter;
    let mut iterations_run = max_iter;

    for t in 1..=max_iter {
        // output linear step
        st.v_p = h_sq.dot(&st.tau_x);
        check_variances("output", &st.v_p, t)?;
        st.p = h.apply(st.x_hat.view()) - &(&st.v_p * &st.s);

        // AWGN output channel
        let tau_s = st.v_p.mapv(|v| 1.0 / (v + noise_var));
        let mut s_new = y - &st.p;
        s_new *= &tau_s;
        st.s = damping * &s_new + (1.0 - damping) * &st.s;

        // input linear step
        st.v_r = transpose_product(&h_sq, tau_s.view()).mapv(|v| 1.0 / v);
        check_variances("input", &st.v_r, t)?;
        st.r = &st.x_hat + &(&st.v_r * &h.apply_adjoint(st.s.view()));

        // scalar MMSE input channel
        let mut x_new = Array1::zeros(problem.n());
        let mut failure = None;
        Zip::from(&mut x_new)
            .and(&mut st.tau_x)
            .and(&st.r)
            .and(&st.v_r)
            .for_each(|xn, tx, &r, &vr| match MmseDenoiser::new(*prior, vr.sqrt()) {
                Ok(d) => {
                    *xn = d.mean(r);
                    *tx = d.variance(r);
                }
                Err(e) => failure = Some(e),
            });
        if failure.is_some() || x_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(t, "input channel produced a non-finite estimate"));
        }
        check_variances("posterior", &st.tau_x, t)?;
        st.x_hat = damping * &x_new + (1.0 - damping) * &st.x_hat;

        let snr = snr_db(st.x_hat.view(), x_true)?;
        records.push(IterRecord {
            iter: t,
            objective: None,
            grad_norm: None,
            snr_db: snr,
        });
        best_snr = best_snr.max(snr);
        if snr < best_snr - DIVERGENCE_DROP_DB {
            stop = StopReason::Diverged;
            iterations_run = t;
            break;
        }
    }

    let trace = SolverTrace {
        records,
        final_iterate: st.x_hat.clone(),
        iterations_run,
        stop,
        monotone_guaranteed: false,
    };
    Ok((trace, st))
}
