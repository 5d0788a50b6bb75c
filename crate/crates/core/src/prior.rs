//! Scalar Bernoulli-Gaussian prior `α·N(0, σ_x²) + (1 − α)·δ₀` and the
//! marginal of its Gaussian-smoothed observation `z = x + σ·n`.
//!
//! The smoothed marginal is the exact two-component mixture
//! `α·φ_{√(σ_x²+σ²)}(z) + (1 − α)·φ_σ(z)`; every quantity derived from it is
//! evaluated in log-domain so that `|z| ≫ σ` never underflows.

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `log(exp(a) + exp(b))` without overflow; either argument may be `-∞`.
pub(crate) fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Logistic function `1 / (1 + exp(t))`, stable for large `|t|`.
pub(crate) fn logistic_neg(t: f64) -> f64 {
    if t > 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

pub(crate) fn log_gaussian_pdf(sigma: f64, x: f64) -> f64 {
    -0.5 * (x / sigma) * (x / sigma) - sigma.ln() - LN_SQRT_2PI
}

/// Zero-mean Gaussian density with standard deviation `sigma`.
pub fn gaussian_pdf(sigma: f64, x: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(log_gaussian_pdf(sigma, x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernoulliGaussianPrior {
    alpha: f64,
    sigma_x: f64,
}

impl BernoulliGaussianPrior {
    /// Prior with the unit-power convention `σ_x² = 1/α`.
    pub fn new(alpha: f64) -> Result<Self> {
        Self::with_sigma_x(alpha, (1.0 / alpha).sqrt())
    }

    /// Prior with a slab standard deviation decoupled from `alpha`.
    pub fn with_sigma_x(alpha: f64, sigma_x: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        if !(sigma_x > 0.0) || !sigma_x.is_finite() {
            return Err(Error::invalid(format!("sigma_x must be positive, got {sigma_x}")));
        }
        Ok(Self { alpha, sigma_x })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    /// Second moment `E[x²] = α·σ_x²`.
    pub fn variance(&self) -> f64 {
        self.alpha * self.sigma_x * self.sigma_x
    }

    /// Draws `n` i.i.d. components: `N(0, σ_x²)` with probability `α`, else exactly zero.
    pub fn sample_signal<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array1<f64>> {
        if n == 0 {
            return Err(Error::invalid("signal length must be at least 1"));
        }
        Ok(Array1::from_shape_fn(n, |_| {
            let active = rng.gen::<f64>() < self.alpha;
            let g: f64 = rng.sample(StandardNormal);
            if active {
                self.sigma_x * g
            } else {
                0.0
            }
        }))
    }

    /// The marginal of `z = x + σ·n`, with mixture constants precomputed.
    pub fn smoothed(&self, sigma: f64) -> Result<SmoothedMarginal> {
        SmoothedMarginal::new(*self, sigma)
    }

    pub fn marginal_density_z(&self, sigma: f64, z: f64) -> Result<f64> {
        let m = self.smoothed(sigma)?;
        check_finite(z)?;
        Ok(m.density(z))
    }

    pub fn h_sigma(&self, sigma: f64, z: f64) -> Result<f64> {
        let m = self.smoothed(sigma)?;
        check_finite(z)?;
        Ok(m.h(z))
    }

    pub fn h_sigma_prime(&self, sigma: f64, z: f64) -> Result<f64> {
        let m = self.smoothed(sigma)?;
        check_finite(z)?;
        Ok(m.h_prime(z))
    }

    pub fn h_sigma_second(&self, sigma: f64, z: f64) -> Result<f64> {
        let m = self.smoothed(sigma)?;
        check_finite(z)?;
        Ok(m.h_second(z))
    }
}

pub(crate) fn check_finite(z: f64) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("argument must be finite, got {z}")))
    }
}

/// Density of `z = x + σ·n` for a Bernoulli-Gaussian `x` and its negative log `h_σ`.
///
/// Methods here skip argument validation; non-finite input propagates as NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedMarginal {
    prior: BernoulliGaussianPrior,
    sigma: f64,
    /// Variance of the slab component, `σ_x² + σ²`.
    slab_var: f64,
    /// Log of the slab weight times its normalizer.
    log_w_slab: f64,
    /// Same for the spike; `-∞` when `α = 1`.
    log_w_spike: f64,
}

impl SmoothedMarginal {
    fn new(prior: BernoulliGaussianPrior, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        let slab_var = prior.sigma_x * prior.sigma_x + sigma * sigma;
        let log_w_slab = prior.alpha.ln() - 0.5 * slab_var.ln() - LN_SQRT_2PI;
        let log_w_spike = if prior.alpha < 1.0 {
            (1.0 - prior.alpha).ln() - sigma.ln() - LN_SQRT_2PI
        } else {
            f64::NEG_INFINITY
        };
        Ok(Self {
            prior,
            sigma,
            slab_var,
            log_w_slab,
            log_w_spike,
        })
    }

    pub fn prior(&self) -> &BernoulliGaussianPrior {
        &self.prior
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `σ_x² + σ²`.
    pub fn slab_variance(&self) -> f64 {
        self.slab_var
    }

    /// Wiener shrinkage of the slab, `σ_x² / (σ_x² + σ²)`.
    pub fn shrinkage(&self) -> f64 {
        self.prior.sigma_x * self.prior.sigma_x / self.slab_var
    }

    #[inline]
    fn log_terms(&self, z: f64) -> (f64, f64) {
        let z2 = z * z;
        (
            self.log_w_slab - 0.5 * z2 / self.slab_var,
            self.log_w_spike - 0.5 * z2 / (self.sigma * self.sigma),
        )
    }

    pub fn log_density(&self, z: f64) -> f64 {
        let (slab, spike) = self.log_terms(z);
        log_sum_exp(slab, spike)
    }

    pub fn density(&self, z: f64) -> f64 {
        self.log_density(z).exp()
    }

    /// Posterior probability that `z` came from the slab, and its complement.
    #[inline]
    pub fn responsibility(&self, z: f64) -> (f64, f64) {
        let (slab, spike) = self.log_terms(z);
        let d = spike - slab;
        (logistic_neg(d), logistic_neg(-d))
    }

    /// `h_σ(z) = −log p_z(z)`.
    pub fn h(&self, z: f64) -> f64 {
        -self.log_density(z)
    }

    #[inline]
    fn precision_mix(&self, pi: f64, pi_c: f64) -> f64 {
        pi / self.slab_var + pi_c / (self.sigma * self.sigma)
    }

    pub fn h_prime(&self, z: f64) -> f64 {
        let (pi, pi_c) = self.responsibility(z);
        z * self.precision_mix(pi, pi_c)
    }

    pub fn h_second(&self, z: f64) -> f64 {
        let (pi, pi_c) = self.responsibility(z);
        // d/dz log(φ_slab/φ_spike) = k·z
        let k = 1.0 / (self.sigma * self.sigma) - 1.0 / self.slab_var;
        self.precision_mix(pi, pi_c) - pi * pi_c * (k * z) * (k * z)
    }
}
