use signtrack_core::experiment::{diffusion_check, mse_curve, paired_deviation, run_replication};
use signtrack_core::regime::{marginal_distribution, mean_parameter};
use signtrack_core::{
    Algorithm, Centering, Coupling, DMatrix, DVector, FilterConfig, GeneratorMatrix, RegimeModel, Scenario,
    SignalModel,
};

fn scenario(coupling: Coupling, n_steps: usize, reps: usize) -> Scenario {
    let q = GeneratorMatrix::from_rows(&[vec![-0.6, 0.4, 0.2], vec![0.2, -0.5, 0.3], vec![0.4, 0.1, -0.5]]).unwrap();
    let states = [-1.0, 0.0, 1.0].iter().map(|&a| DVector::from_element(1, a)).collect();
    let regime = RegimeModel::new(states, q, 0.0, DVector::from_row_slice(&[0.75, 0.125, 0.125])).unwrap();
    let signal = SignalModel::gaussian(DMatrix::identity(1, 1), 0.25).unwrap();
    let filter = FilterConfig::new(Algorithm::SignError, 0.05, DVector::zeros(1)).unwrap();
    Scenario::new(regime, signal, filter, coupling, n_steps, reps, 2024).unwrap()
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let s = scenario(Coupling::Fast { gamma: 0.5 }, 400, 70);
    let a = diffusion_check(&s, Centering::StationaryMean, 70, Some(1)).unwrap();
    let b = diffusion_check(&s, Centering::StationaryMean, 70, Some(3)).unwrap();
    assert_eq!(a, b);

    let s = scenario(Coupling::Proportional { c: 1.0 }, 0, 20).with_mu(0.02).unwrap();
    let a = paired_deviation(&s, 1e-3, 2.0, Some(1)).unwrap();
    let b = paired_deviation(&s, 1e-3, 2.0, Some(5)).unwrap();
    assert_eq!(a, b);

    let s = scenario(Coupling::Slow { delta: 1.0 }, 300, 130);
    let a = mse_curve(&s, &Algorithm::ALL, Some(1)).unwrap();
    let b = mse_curve(&s, &Algorithm::ALL, Some(6)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_changes_results() {
    let s = scenario(Coupling::Proportional { c: 0.6 }, 200, 10);
    let mut t = s.clone();
    t.master_seed += 1;
    let a = mse_curve(&s, &[Algorithm::Lms], None).unwrap();
    let b = mse_curve(&t, &[Algorithm::Lms], None).unwrap();
    assert_ne!(a, b);
}

#[test]
fn estimates_follow_the_marginal_mean_of_the_chain() {
    let s = scenario(Coupling::Slow { delta: 1.0 }, 400, 400);
    let n = s.n_steps;
    let finals: Vec<f64> = (0..s.n_replications)
        .map(|i| run_replication(&s, &[Algorithm::SignError], i).unwrap()[0].thetas[n][0])
        .collect();
    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    let law = marginal_distribution(&s.regime, n);
    let expected = mean_parameter(s.regime.states(), &law)[0];
    let sd = (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (finals.len() - 1) as f64).sqrt();
    let se = sd / (finals.len() as f64).sqrt();
    assert!((mean - expected).abs() < 4.0 * se + 0.02, "{mean} vs {expected} (se {se})");
}
