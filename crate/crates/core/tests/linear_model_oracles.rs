mod common;

use common::{central_difference, rel_err, sparse_instance};
use nalgebra::DMatrix;
use ndarray::Array1;
use pnp_mmse::linear_model::{calibrate_noise_sigma, POWER_ITERATION_MAX_ITER, POWER_ITERATION_TOL};
use pnp_mmse::{BernoulliGaussianPrior, MeasurementOperator, ProblemInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense(op: &MeasurementOperator) -> DMatrix<f64> {
    let a = op.matrix();
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

#[test]
fn lipschitz_matches_dense_eigensolver() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = MeasurementOperator::gaussian(50, 100, &mut rng).unwrap();
        let h = dense(&op);
        let gram = &h * h.transpose();
        let exact = gram.symmetric_eigen().eigenvalues.max();
        let est = op.lipschitz_constant(POWER_ITERATION_TOL, POWER_ITERATION_MAX_ITER).unwrap();
        assert!(est.converged);
        assert!((est.value / exact - 1.0).abs() < 1e-4, "seed {seed}: {} vs {exact}", est.value);
        assert!(est.value <= exact * (1.0 + POWER_ITERATION_TOL));
    }
}

#[test]
fn tall_gaussian_operator_spectral_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let op = MeasurementOperator::gaussian(2000, 100, &mut rng).unwrap();
    let s_max = dense(&op).singular_values().max();
    assert!((0.9..=1.4).contains(&s_max), "{s_max}");
    let est = op.lipschitz_constant(POWER_ITERATION_TOL, POWER_ITERATION_MAX_ITER).unwrap();
    assert!((est.value.sqrt() / s_max - 1.0).abs() < 1e-4);
}

#[test]
fn realized_input_snr_concentrates() {
    let m = 3276;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prior = BernoulliGaussianPrior::new(0.2).unwrap();
    let x = prior.sample_signal(100, &mut rng).unwrap();
    let op = MeasurementOperator::gaussian(m, 100, &mut rng).unwrap();
    let clean = op.apply(x.view());
    for trial in 0..10 {
        let p = ProblemInstance::at_input_snr(op.clone(), x.clone(), 20.0, &mut rng).unwrap();
        let e = p.y() - &clean;
        let realized = 10.0 * (clean.dot(&clean) / e.dot(&e)).log10();
        assert!((realized - 20.0).abs() <= 0.5, "trial {trial}: {realized}");
    }
}

#[test]
fn noise_level_scales_with_snr() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let op = MeasurementOperator::gaussian(30, 40, &mut rng).unwrap();
    let x = Array1::from_shape_fn(40, |_| rng.gen_range(-1.0..1.0));
    let s0 = calibrate_noise_sigma(&op, x.view(), 0.0).unwrap();
    let s60 = calibrate_noise_sigma(&op, x.view(), 60.0).unwrap();
    assert!((s0 / s60 / 1e3 - 1.0).abs() < 1e-12);
}

#[test]
fn data_fidelity_gradient_matches_finite_differences() {
    let p = sparse_instance(3, 0.3, 6, 8, 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let x = Array1::from_shape_fn(8, |_| rng.gen_range(-2.0..2.0));
        let fd = central_difference(|v| p.data_fidelity(v.view()).unwrap(), &x, 1e-5);
        let g = p.grad_data_fidelity(x.view()).unwrap();
        assert!(rel_err(&fd, &g) < 1e-6);
    }
}
