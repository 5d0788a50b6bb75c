use pnp_mmse::experiment::{normalized_cost, run_convergence_experiment, ExperimentConfig, SolverKind};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn sparse_regime_pnp_beats_tuned_lasso() {
    let config = ExperimentConfig {
        n: 1024,
        trials: 6,
        alpha: 0.05,
        measurement_rates: vec![0.8],
        solvers: vec![SolverKind::Pnp, SolverKind::Lasso],
        ..ExperimentConfig::default()
    };
    let report = run_convergence_experiment(&config).unwrap();
    assert!(report.trials.failures.is_empty());
    let pnp: Vec<f64> = report.trials.results.iter().map(|r| r.pnp.as_ref().unwrap().trace.final_snr()).collect();
    let lasso: Vec<f64> = report.trials.results.iter().map(|r| r.lasso.as_ref().unwrap().trace.final_snr()).collect();
    assert!(mean(&pnp) > mean(&lasso) + 0.5, "pnp {pnp:?} lasso {lasso:?}");

    for r in &report.trials.results {
        let f = normalized_cost(&r.pnp.as_ref().unwrap().trace);
        assert_eq!(f.len(), 501);
        assert!(f.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-9), "trial {}", r.trial);
    }
    let final_cost = report.cost.last().unwrap();
    assert_eq!(final_cost.iter, 500);
    assert!(final_cost.f_norm.max < 1.0);
}
