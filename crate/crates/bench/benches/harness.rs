use criterion::{criterion_group, criterion_main, Criterion};
use signtrack_core::experiment::{diffusion_check, mse_curve, paired_deviation};
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
    Scenario::new(regime, signal, filter, coupling, n_steps, reps, 1729).unwrap()
}

fn monte_carlo(c: &mut Criterion) {
    let mut group = c.benchmark_group("harness");
    group.sample_size(10);

    let s = scenario(Coupling::Proportional { c: 0.6 }, 1000, 200);
    group.bench_function("mse_curve/3 algorithms x 200 reps", |b| {
        b.iter(|| mse_curve(&s, &Algorithm::ALL, None).unwrap())
    });

    let s = scenario(Coupling::Proportional { c: 1.0 }, 0, 50).with_mu(0.02).unwrap();
    group.bench_function("paired_deviation/50 reps", |b| b.iter(|| paired_deviation(&s, 1e-3, 10.0, None).unwrap()));

    let s = scenario(Coupling::Fast { gamma: 0.5 }, 1000, 500);
    group.bench_function("diffusion_check/500 reps", |b| {
        b.iter(|| diffusion_check(&s, Centering::StationaryMean, 500, None).unwrap())
    });
    group.finish();
}

criterion_group!(benches, monte_carlo);
criterion_main!(benches);
