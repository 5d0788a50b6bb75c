//! Exact scalar MMSE denoiser for the Bernoulli-Gaussian prior and the
//! regularizer it is the proximal operator of.
//!
//! For `z = x + σ·n` the posterior mean collapses to
//! `D_σ(z) = π(z)·c·z` with `c = σ_x²/(σ_x²+σ²)` and `π(z)` the posterior slab
//! probability. `D_σ` is odd, strictly increasing and unbounded, so its
//! inverse is defined on all of ℝ and the regularizer
//!
//! ```text
//! h(x) = Σᵢ −(xᵢ − uᵢ)²/(2γ) + (σ²/γ)·h_σ(uᵢ),   uᵢ = D_σ⁻¹(xᵢ)
//! ```
//!
//! is finite everywhere; the `+∞` branch outside the image never triggers.

use ndarray::{Array1, ArrayView1, Zip};

use crate::error::{Error, Result};
use crate::prior::{check_finite, BernoulliGaussianPrior, SmoothedMarginal};

/// Relative residual at which Newton iterations stop refining.
const INVERSE_REFINE_TOL: f64 = 1e-14;
/// Contract on the returned inverse: `|D(z) − x| ≤ INVERSE_TOL·max(1, |x|)`.
pub const INVERSE_TOL: f64 = 1e-12;
const MAX_BRACKET_DOUBLINGS: usize = 200;
const MAX_NEWTON_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmseDenoiser {
    marginal: SmoothedMarginal,
}

impl MmseDenoiser {
    pub fn new(prior: BernoulliGaussianPrior, sigma: f64) -> Result<Self> {
        Ok(Self {
            marginal: prior.smoothed(sigma)?,
        })
    }

    pub fn prior(&self) -> &BernoulliGaussianPrior {
        self.marginal.prior()
    }

    pub fn sigma(&self) -> f64 {
        self.marginal.sigma()
    }

    pub fn marginal(&self) -> &SmoothedMarginal {
        &self.marginal
    }

    #[inline]
    pub(crate) fn mean(&self, z: f64) -> f64 {
        let (pi, _) = self.marginal.responsibility(z);
        pi * self.marginal.shrinkage() * z
    }

    #[inline]
    pub(crate) fn variance(&self, z: f64) -> f64 {
        let (pi, pi_c) = self.marginal.responsibility(z);
        let c = self.marginal.shrinkage();
        let s2 = self.sigma() * self.sigma();
        // π(cσ² + (cz)²) − (πcz)², rearranged so no cancellation occurs
        pi * c * s2 + pi * pi_c * (c * z) * (c * z)
    }

    #[inline]
    pub(crate) fn slope(&self, z: f64) -> f64 {
        1.0 - self.sigma() * self.sigma() * self.marginal.h_second(z)
    }

    /// Posterior mean `E[x | z]`.
    pub fn denoise_scalar(&self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(self.mean(z))
    }

    pub fn denoise_vector(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("denoiser input must be finite, got {bad}")));
        }
        Ok(z.mapv(|v| self.mean(v)))
    }

    /// Posterior variance `Var[x | z]`.
    pub fn posterior_variance_scalar(&self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(self.variance(z))
    }

    /// `D′(z) = 1 − σ²·h_σ″(z)`, always positive.
    pub fn denoiser_derivative(&self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(self.slope(z))
    }

    /// `D(z) − (z − σ²·h_σ′(z))`; zero up to rounding by Tweedie's formula.
    pub fn tweedie_residual(&self, z: f64) -> Result<f64> {
        check_finite(z)?;
        let s2 = self.sigma() * self.sigma();
        Ok(self.mean(z) - (z - s2 * self.marginal.h_prime(z)))
    }

    /// The unique `z` with `D(z) = x`.
    ///
    /// Brackets the root by doubling from `x/c` (where `|D(z)| ≤ c|z|`), then
    /// runs Newton steps on `D(z) − x`, falling back to bisection whenever a
    /// step leaves the bracket.
    pub fn invert_scalar(&self, x: f64) -> Result<f64> {
        check_finite(x)?;
        self.inverse(x)
    }

    pub fn invert_vector(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(x.len());
        for (o, &v) in out.iter_mut().zip(x.iter()) {
            check_finite(v)?;
            *o = self.inverse(v)?;
        }
        Ok(out)
    }

    fn inverse(&self, x: f64) -> Result<f64> {
        if x == 0.0 {
            return Ok(0.0);
        }
        let c = self.marginal.shrinkage();
        let target = x.abs();
        if self.prior().alpha() == 1.0 {
            return Ok(x / c);
        }

        let mut lo = target / c;
        let mut hi = 2.0 * lo;
        let mut doublings = 0;
        while self.mean(hi) < target {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > MAX_BRACKET_DOUBLINGS || !hi.is_finite() {
                return Err(Error::numerical(
                    doublings,
                    format!("could not bracket the inverse of {x}"),
                ));
            }
        }

        let mut z = 0.5 * (lo + hi);
        for _ in 0..MAX_NEWTON_STEPS {
            let f = self.mean(z) - target;
            if f.abs() <= INVERSE_REFINE_TOL * target {
                break;
            }
            if f > 0.0 {
                hi = z;
            } else {
                lo = z;
            }
            if hi - lo <= 4.0 * f64::EPSILON * hi {
                break;
            }
            let newton = z - f / self.slope(z);
            z = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }

        let residual = (self.mean(z) - target).abs();
        if residual > INVERSE_TOL * target.max(1.0) {
            return Err(Error::numerical(
                MAX_NEWTON_STEPS,
                format!("inverse of {x} stalled with residual {residual:e}"),
            ));
        }
        Ok(z.copysign(x))
    }
}

/// A denoiser bound to a step size; the induced regularizer depends on both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerContext {
    denoiser: MmseDenoiser,
    gamma: f64,
}

impl RegularizerContext {
    pub fn new(denoiser: MmseDenoiser, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::invalid(format!("step size must be positive, got {gamma}")));
        }
        Ok(Self { denoiser, gamma })
    }

    pub fn denoiser(&self) -> &MmseDenoiser {
        &self.denoiser
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    fn term(&self, x: f64, u: f64) -> f64 {
        let s2 = self.denoiser.sigma() * self.denoiser.sigma();
        (-0.5 * (x - u) * (x - u) + s2 * self.denoiser.marginal.h(u)) / self.gamma
    }

    pub fn regularizer_h(&self, x: ArrayView1<f64>) -> Result<f64> {
        let u = self.denoiser.invert_vector(x)?;
        Ok(x.iter().zip(u.iter()).map(|(&xi, &ui)| self.term(xi, ui)).sum())
    }

    /// `∇h(x) = (D⁻¹(x) − x)/γ`.
    pub fn regularizer_grad(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let u = self.denoiser.invert_vector(x)?;
        Ok((u - &x) / self.gamma)
    }

    /// Value and gradient sharing one componentwise inversion.
    pub fn value_and_grad(&self, x: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
        let u = self.denoiser.invert_vector(x)?;
        let value = x.iter().zip(u.iter()).map(|(&xi, &ui)| self.term(xi, ui)).sum();
        let mut grad = u;
        Zip::from(&mut grad).and(&x).for_each(|g, &xi| *g = (*g - xi) / self.gamma);
        Ok((value, grad))
    }

    /// `φ(u) = ½(D(u) − z)² − (σ⁴/2)·h_σ′(u)² + σ²·h_σ(u)`, which equals
    /// `½(D(u) − z)² + γ·h(D(u))` and is uniquely minimized at `u = z`.
    pub fn prox_oracle_phi(&self, u: f64, z: f64) -> Result<f64> {
        check_finite(u)?;
        check_finite(z)?;
        let s2 = self.denoiser.sigma() * self.denoiser.sigma();
        let m = &self.denoiser.marginal;
        let d = self.denoiser.mean(u) - z;
        let hp = m.h_prime(u);
        Ok(0.5 * d * d - 0.5 * s2 * s2 * hp * hp + s2 * m.h(u))
    }
}
