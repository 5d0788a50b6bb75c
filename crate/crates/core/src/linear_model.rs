//! Measurement model `y = Hx + e` with dense Gaussian `H`, least-squares data
//! fidelity and the spectral quantities the solvers need.

use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Returned by [`snr_db`] for an exact reconstruction.
pub const SNR_CAP_DB: f64 = 300.0;

/// Safety factor applied to `1/L̂` for the default step size.
pub const STEP_SAFETY: f64 = 0.99;

pub const POWER_ITERATION_TOL: f64 = 1e-9;
pub const POWER_ITERATION_MAX_ITER: usize = 2000;
const POWER_ITERATION_SEED: u64 = 0x5EED_1A5E;

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    matrix: Array2<f64>,
}

impl MeasurementOperator {
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::invalid("operator dimensions must be positive"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("operator entries must be finite"));
        }
        // row-major storage keeps both products streaming over contiguous rows
        let matrix = if matrix.is_standard_layout() {
            matrix
        } else {
            matrix.as_standard_layout().into_owned()
        };
        Ok(Self { matrix })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_matrix(Array2::eye(n))
    }

    /// `m × n` operator with i.i.d. `N(0, 1/m)` entries.
    pub fn gaussian<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::invalid(format!("operator dimensions must be positive, got {m}x{n}")));
        }
        let scale = 1.0 / (m as f64).sqrt();
        let matrix = Array2::from_shape_simple_fn((m, n), || scale * rng.sample::<f64, _>(StandardNormal));
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn m(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n(&self) -> usize {
        self.matrix.ncols()
    }

    /// `Hx`.
    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.matrix.dot(&x)
    }

    /// `Hᵀr`, accumulated row by row.
    pub fn apply_adjoint(&self, r: ArrayView1<f64>) -> Array1<f64> {
        transpose_product(&self.matrix, r)
    }

    /// Largest eigenvalue of `HᵀH` by power iteration from a fixed random start.
    pub fn lipschitz_constant(&self, tol: f64, max_iter: usize) -> Result<LipschitzEstimate> {
        if !(tol > 0.0) || max_iter == 0 {
            return Err(Error::invalid("power iteration needs tol > 0 and max_iter ≥ 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
        let mut v = Array1::from_shape_simple_fn(self.n(), || rng.sample::<f64, _>(StandardNormal));
        v /= norm(v.view());
        let mut value = 0.0;
        for it in 1..=max_iter {
            let hv = self.apply(v.view());
            let next = hv.dot(&hv);
            let w = self.apply_adjoint(hv.view());
            let w_norm = norm(w.view());
            if next == 0.0 || w_norm == 0.0 {
                return Err(Error::invalid("operator is zero"));
            }
            v = w / w_norm;
            let converged = (next - value).abs() < tol * next;
            value = next;
            if converged {
                return Ok(LipschitzEstimate {
                    value,
                    iterations: it,
                    converged: true,
                });
            }
        }
        Ok(LipschitzEstimate {
            value,
            iterations: max_iter,
            converged: false,
        })
    }
}

/// Power-iteration estimate `L̂` of `λ_max(HᵀH)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub iterations: usize,
    /// False when `max_iter` ran out before the relative change dropped below `tol`.
    pub converged: bool,
}

impl LipschitzEstimate {
    /// `0.99 / L̂`.
    pub fn default_step(&self) -> f64 {
        STEP_SAFETY / self.value
    }
}

/// Per-component noise std giving `‖Hx‖² / E‖e‖²` equal to the target input SNR.
pub fn calibrate_noise_sigma(operator: &MeasurementOperator, x_true: ArrayView1<f64>, input_snr_db: f64) -> Result<f64> {
    if x_true.len() != operator.n() {
        return Err(Error::invalid("signal length does not match operator"));
    }
    if !input_snr_db.is_finite() {
        return Err(Error::invalid("input SNR must be finite"));
    }
    let signal = norm(operator.apply(x_true).view());
    if signal == 0.0 {
        return Err(Error::invalid("measured signal is zero; noise level is undefined"));
    }
    Ok(signal / (operator.m() as f64 * 10f64.powf(input_snr_db / 10.0)).sqrt())
}

/// `10·log₁₀(‖x_ref‖² / ‖x_hat − x_ref‖²)`, capped at [`SNR_CAP_DB`].
pub fn snr_db(x_hat: ArrayView1<f64>, x_ref: ArrayView1<f64>) -> Result<f64> {
    if x_hat.len() != x_ref.len() {
        return Err(Error::invalid("SNR arguments differ in length"));
    }
    let signal = x_ref.dot(&x_ref);
    if signal == 0.0 {
        return Err(Error::invalid("SNR reference is zero"));
    }
    let err: f64 = x_hat.iter().zip(x_ref.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    if err == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / err).log10()).min(SNR_CAP_DB))
}

/// `Aᵀr` for a row-major `A`, without strided access.
pub(crate) fn transpose_product(a: &Array2<f64>, r: ArrayView1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(a.ncols());
    for (row, &ri) in a.rows().into_iter().zip(r.iter()) {
        out.scaled_add(ri, &row);
    }
    out
}

pub(crate) fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// One realization of `(H, x_true, y)`; the noise `e` is not retained.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    operator: MeasurementOperator,
    x_true: Array1<f64>,
    y: Array1<f64>,
    sigma_e: f64,
    lipschitz: OnceLock<LipschitzEstimate>,
}

impl ProblemInstance {
    pub fn new(operator: MeasurementOperator, x_true: Array1<f64>, y: Array1<f64>, sigma_e: f64) -> Result<Self> {
        if x_true.len() != operator.n() || y.len() != operator.m() {
            return Err(Error::invalid(format!(
                "dimension mismatch: operator {}x{}, x {}, y {}",
                operator.m(),
                operator.n(),
                x_true.len(),
                y.len()
            )));
        }
        if !(sigma_e >= 0.0) || !sigma_e.is_finite() {
            return Err(Error::invalid(format!("noise std must be nonnegative, got {sigma_e}")));
        }
        Ok(Self {
            operator,
            x_true,
            y,
            sigma_e,
            lipschitz: OnceLock::new(),
        })
    }

    /// `y = Hx + e` with `e ~ N(0, σ_e² I)` drawn from `noise_rng`.
    pub fn with_noise<R: Rng + ?Sized>(operator: MeasurementOperator, x_true: Array1<f64>, sigma_e: f64, noise_rng: &mut R) -> Result<Self> {
        if x_true.len() != operator.n() {
            return Err(Error::invalid("signal length does not match operator"));
        }
        let mut y = operator.apply(x_true.view());
        if sigma_e > 0.0 {
            y.mapv_inplace(|v| v + sigma_e * noise_rng.sample::<f64, _>(StandardNormal));
        }
        Self::new(operator, x_true, y, sigma_e)
    }

    /// Like [`ProblemInstance::with_noise`] with `σ_e` calibrated to an input SNR.
    pub fn at_input_snr<R: Rng + ?Sized>(operator: MeasurementOperator, x_true: Array1<f64>, input_snr_db: f64, noise_rng: &mut R) -> Result<Self> {
        let sigma_e = calibrate_noise_sigma(&operator, x_true.view(), input_snr_db)?;
        Self::with_noise(operator, x_true, sigma_e, noise_rng)
    }

    pub fn operator(&self) -> &MeasurementOperator {
        &self.operator
    }

    pub fn x_true(&self) -> &Array1<f64> {
        &self.x_true
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn sigma_e(&self) -> f64 {
        self.sigma_e
    }

    pub fn n(&self) -> usize {
        self.operator.n()
    }

    pub fn m(&self) -> usize {
        self.operator.m()
    }

    /// Cached power-iteration estimate with the default tolerance.
    pub fn lipschitz(&self) -> Result<LipschitzEstimate> {
        if let Some(l) = self.lipschitz.get() {
            return Ok(*l);
        }
        let l = self.operator.lipschitz_constant(POWER_ITERATION_TOL, POWER_ITERATION_MAX_ITER)?;
        Ok(*self.lipschitz.get_or_init(|| l))
    }

    fn check_len(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::invalid(format!("iterate has length {}, expected {}", x.len(), self.n())));
        }
        Ok(())
    }

    /// `g(x) = ½‖y − Hx‖²`.
    pub fn data_fidelity(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.check_len(x)?;
        let r = self.operator.apply(x) - &self.y;
        Ok(0.5 * r.dot(&r))
    }

    /// `∇g(x) = Hᵀ(Hx − y)`.
    pub fn grad_data_fidelity(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_len(x)?;
        let r = self.operator.apply(x) - &self.y;
        Ok(self.operator.apply_adjoint(r.view()))
    }

    pub fn fidelity_and_grad(&self, x: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
        self.check_len(x)?;
        let r = self.operator.apply(x) - &self.y;
        Ok((0.5 * r.dot(&r), self.operator.apply_adjoint(r.view())))
    }
}
