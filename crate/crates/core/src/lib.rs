//! Plug-and-play ISTA with an exact MMSE denoiser for i.i.d. Bernoulli-Gaussian
//! signals.
//!
//! The crate is organised bottom-up:
//!
//! - [`prior`]: the scalar Bernoulli-Gaussian prior, its Gaussian-smoothed
//!   marginal and the negative log-marginal `h_σ` with analytic derivatives.
//! - [`denoiser`]: the closed-form MMSE denoiser, its derivative and inverse,
//!   and the explicit regularizer for which the denoiser is a proximal map.
//! - [`linear_model`]: Gaussian measurement operators, noise calibration, the
//!   least-squares data term and a power-iteration Lipschitz estimate.
//! - [`solvers`]: PnP-ISTA, LASSO-ISTA and MMSE-GAMP with per-iteration traces.
//! - [`experiment`]: seeded multi-trial runs, hyperparameter searches, CSV
//!   output for the `pnp-mmse` binary.
//! - [`validation`]: the small-scale invariant suite behind `pnp-mmse validate`.

pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod linear_model;
pub mod prior;
pub mod solvers;
pub mod validation;

pub use denoiser::{MmseDenoiser, RegularizerContext};
pub use error::{Error, Result};
pub use linear_model::{LipschitzEstimate, MeasurementOperator, ProblemInstance};
pub use prior::BernoulliGaussianPrior;
pub use solvers::{IterRecord, SolverTrace, StopReason};
