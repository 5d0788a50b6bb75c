//! Iterative reconstruction algorithms and their per-iteration traces.
//!
//! All solvers start from `x⁰ = 0`. PnP-ISTA and LASSO-ISTA record the
//! objective they descend; GAMP records only the SNR.

mod gamp;
mod lasso;
mod pnp;

pub use gamp::{gamp, gamp_with_state, GampState, DEFAULT_DAMPING, DIVERGENCE_DROP_DB};
pub use lasso::{lasso_ista, soft_threshold};
pub use pnp::{fixed_point_residual, mm_surrogate_value, pnp_ista, TraceOptions};

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::linear_model::ProblemInstance;

/// Iteration budget used when a caller has no reason to pick another.
pub const DEFAULT_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    /// Objective value at this iterate; absent for GAMP and untraced iterations.
    pub objective: Option<f64>,
    pub grad_norm: Option<f64>,
    pub snr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIter,
    /// Relative gradient norm dropped below the requested tolerance.
    GradientTolerance,
    /// SNR fell too far below its running maximum.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct SolverTrace {
    pub records: Vec<IterRecord>,
    pub final_iterate: Array1<f64>,
    pub iterations_run: usize,
    pub stop: StopReason,
    /// Whether the step size satisfied `γ ≤ 1/L̂`, so the objective must not increase.
    pub monotone_guaranteed: bool,
}

impl SolverTrace {
    pub fn final_snr(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.snr_db)
    }

    pub fn objectives(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.objective.map(|f| (r.iter, f))).collect()
    }

    pub fn grad_norms(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.grad_norm.map(|g| (r.iter, g))).collect()
    }

    pub fn record_at(&self, iter: usize) -> Option<&IterRecord> {
        self.records.iter().find(|r| r.iter == iter)
    }

    /// First traced step where `f(xᵗ) > f(xᵗ⁻¹) + rel_tol·|f(x⁰)|`, if any.
    pub fn first_monotonicity_violation(&self, rel_tol: f64) -> Option<(usize, f64)> {
        let f = self.objectives();
        let scale = f.first().map_or(0.0, |(_, f0)| f0.abs());
        f.windows(2).find_map(|w| {
            let increase = w[1].1 - w[0].1;
            (increase > rel_tol * scale).then_some((w[1].0, increase))
        })
    }
}

fn check_common(problem: &ProblemInstance, gamma: f64, max_iter: usize) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("step size must be positive, got {gamma}")));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    Ok(problem.lipschitz()?.value)
}
