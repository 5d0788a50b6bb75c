#![allow(dead_code)]

use ndarray::Array1;
use pnp_mmse::{BernoulliGaussianPrior, MeasurementOperator, ProblemInstance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Double-exponential quadrature over `[a, b]`, split into panels no wider
/// than `panel` so each piece stays within the rule's evaluation budget.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panel: f64, abs_tol: f64) -> f64 {
    let pieces = ((b - a) / panel).ceil().max(1.0) as usize;
    let width = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let lo = a + width * k as f64;
            quadrature::integrate(&f, lo, lo + width, abs_tol / pieces as f64).integral
        })
        .sum()
}

pub fn normal_pdf(sigma: f64, x: f64) -> f64 {
    (-0.5 * (x / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// `∫ φ_σ(z − x) p_x(dx)` plus the first two posterior moments, with the
/// slab part integrated numerically and the atom at zero added exactly.
pub struct ChannelOracle {
    pub density: f64,
    pub mean: f64,
    pub variance: f64,
}

pub fn channel_oracle(alpha: f64, sigma_x: f64, sigma: f64, z: f64) -> ChannelOracle {
    let half = z.abs() + 15.0 * (sigma_x + sigma);
    let panel = 0.5 * sigma.min(sigma_x);
    let slab = |x: f64| alpha * normal_pdf(sigma_x, x) * normal_pdf(sigma, z - x);
    let m0 = integrate(slab, -half, half, panel, 1e-16) + (1.0 - alpha) * normal_pdf(sigma, z);
    let m1 = integrate(|x| x * slab(x), -half, half, panel, 1e-16);
    let m2 = integrate(|x| x * x * slab(x), -half, half, panel, 1e-16);
    let mean = m1 / m0;
    ChannelOracle {
        density: m0,
        mean,
        variance: m2 / m0 - mean * mean,
    }
}

pub fn sparse_instance(seed: u64, alpha: f64, m: usize, n: usize, snr_db: f64) -> ProblemInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = BernoulliGaussianPrior::new(alpha).unwrap();
    let mut x = prior.sample_signal(n, &mut rng).unwrap();
    if x.iter().all(|v| *v == 0.0) {
        x[0] = 1.0;
    }
    let h = MeasurementOperator::gaussian(m, n, &mut rng).unwrap();
    ProblemInstance::at_input_snr(h, x, snr_db, &mut rng).unwrap()
}

pub fn central_difference<F: Fn(&Array1<f64>) -> f64>(f: F, x: &Array1<f64>, step: f64) -> Array1<f64> {
    Array1::from_shape_fn(x.len(), |i| {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += step;
        b[i] -= step;
        (f(&a) - f(&b)) / (2.0 * step)
    })
}

pub fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let d = (a - b).mapv(|v| v * v).sum().sqrt();
    d / b.mapv(|v| v * v).sum().sqrt()
}
