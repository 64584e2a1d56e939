//! Recursive estimators and the single-replication driver.
//!
//! All three filters update `θ` from one `(φ_n, y_n)` pair:
//!
//! ```text
//! SE:  θ ← θ + μ φ sgn(y − φᵀθ)
//! SR:  θ ← θ + μ sgn(φ) (y − φᵀθ)      (sgn componentwise)
//! LMS: θ ← θ + μ φ (y − φᵀθ)
//! ```

use std::fmt;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regime::{sample_dtmc, DiscretePath, RegimeModel};
use crate::signal::SignalModel;

pub const DEFAULT_DIVERGENCE_GUARD: f64 = 1e6;

/// `1{x > 0} − 1{x < 0}`; in particular `sign(0) = 0`.
pub fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn signf(x: f64) -> f64 {
    f64::from(sign(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "SE")]
    SignError,
    #[serde(rename = "SR")]
    SignRegressor,
    #[serde(rename = "LMS")]
    Lms,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::SignError, Algorithm::SignRegressor, Algorithm::Lms];

    pub fn short_name(self) -> &'static str {
        match self {
            Algorithm::SignError => "SE",
            Algorithm::SignRegressor => "SR",
            Algorithm::Lms => "LMS",
        }
    }

    /// In-place update. Dimensions are assumed to match.
    pub fn update(self, theta: &mut DVector<f64>, phi: &DVector<f64>, y: f64, mu: f64) {
        let residual = y - phi.dot(theta);
        match self {
            Algorithm::SignError => theta.axpy(mu * signf(residual), phi, 1.0),
            Algorithm::SignRegressor => {
                for (t, p) in theta.iter_mut().zip(phi.iter()) {
                    *t += mu * signf(*p) * residual;
                }
            }
            Algorithm::Lms => theta.axpy(mu * residual, phi, 1.0),
        }
    }

    pub fn step(self, theta: &DVector<f64>, phi: &DVector<f64>, y: f64, mu: f64) -> Result<DVector<f64>> {
        if theta.len() != phi.len() {
            return Err(Error::DimensionMismatch {
                expected: theta.len(),
                found: phi.len(),
            });
        }
        let mut next = theta.clone();
        self.update(&mut next, phi, y, mu);
        Ok(next)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

pub fn se_step(theta: &DVector<f64>, phi: &DVector<f64>, y: f64, mu: f64) -> Result<DVector<f64>> {
    Algorithm::SignError.step(theta, phi, y, mu)
}

pub fn sr_step(theta: &DVector<f64>, phi: &DVector<f64>, y: f64, mu: f64) -> Result<DVector<f64>> {
    Algorithm::SignRegressor.step(theta, phi, y, mu)
}

pub fn lms_step(theta: &DVector<f64>, phi: &DVector<f64>, y: f64, mu: f64) -> Result<DVector<f64>> {
    Algorithm::Lms.step(theta, phi, y, mu)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterConfig {
    pub algorithm: Algorithm,
    pub mu: f64,
    pub theta0: DVector<f64>,
    /// Abort the run once `|θ_n|` exceeds this.
    pub divergence_guard: f64,
}

impl FilterConfig {
    pub fn new(algorithm: Algorithm, mu: f64, theta0: DVector<f64>) -> Result<Self> {
        // mu = 0 is accepted: it freezes the estimate, which is a useful baseline.
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!("stepsize must be >= 0, got {mu}")));
        }
        if theta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("theta0 must be finite".into()));
        }
        Ok(Self {
            algorithm,
            mu,
            theta0,
            divergence_guard: DEFAULT_DIVERGENCE_GUARD,
        })
    }

    pub fn with_algorithm(&self, algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            ..self.clone()
        }
    }
}

/// Exogenous inputs of one replication, shared by every filter run on it.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalDraws {
    pub regressors: Vec<DVector<f64>>,
    pub noise: Vec<f64>,
}

impl SignalDraws {
    pub fn sample<R: Rng + ?Sized>(signal: &SignalModel, n: usize, rng: &mut R) -> Self {
        let mut regressors = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        for _ in 0..n {
            let (phi, e) = signal.sample_signal(rng);
            regressors.push(phi);
            noise.push(e);
        }
        Self { regressors, noise }
    }

    pub fn len(&self) -> usize {
        self.noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noise.is_empty()
    }
}

/// One replication: estimates `θ_0..θ_n`, chain `α_0..α_n`, observations
/// `y_0..y_{n-1}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub algorithm: Algorithm,
    pub thetas: Vec<DVector<f64>>,
    pub chain: DiscretePath,
    pub observations: Vec<f64>,
    pub mu: f64,
    pub epsilon: f64,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.observations.len()
    }

    /// `|α_n − θ_n|²` for every n.
    pub fn squared_errors(&self, regime: &RegimeModel) -> Vec<f64> {
        self.thetas
            .iter()
            .zip(&self.chain.indices)
            .map(|(theta, &s)| (regime.state(s) - theta).norm_squared())
            .collect()
    }
}

fn check_dims(regime: &RegimeModel, signal: &SignalModel, filt: &FilterConfig) -> Result<()> {
    let r = regime.dim();
    for found in [signal.dim(), filt.theta0.len()] {
        if found != r {
            return Err(Error::DimensionMismatch { expected: r, found });
        }
    }
    Ok(())
}

/// Draws the chain path then the signal sequence from one stream.
pub fn draw_inputs<R: Rng + ?Sized>(
    regime: &RegimeModel,
    signal: &SignalModel,
    n_steps: usize,
    rng: &mut R,
) -> (DiscretePath, SignalDraws) {
    let chain = sample_dtmc(regime, n_steps, rng);
    let draws = SignalDraws::sample(signal, n_steps, rng);
    (chain, draws)
}

/// Runs one filter over a fixed chain path and signal sequence.
pub fn run_on_inputs(
    regime: &RegimeModel,
    chain: &DiscretePath,
    draws: &SignalDraws,
    filt: &FilterConfig,
) -> Result<Trajectory> {
    let n = draws.len();
    if chain.len() != n + 1 {
        return Err(Error::DimensionMismatch {
            expected: n + 1,
            found: chain.len(),
        });
    }
    let r = regime.dim();
    if filt.theta0.len() != r {
        return Err(Error::DimensionMismatch {
            expected: r,
            found: filt.theta0.len(),
        });
    }
    let mut thetas = Vec::with_capacity(n + 1);
    let mut observations = Vec::with_capacity(n);
    let mut theta = filt.theta0.clone();
    thetas.push(theta.clone());
    for k in 0..n {
        let phi = &draws.regressors[k];
        if phi.len() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                found: phi.len(),
            });
        }
        let y = phi.dot(regime.state(chain.indices[k])) + draws.noise[k];
        filt.algorithm.update(&mut theta, phi, y, filt.mu);
        let norm = theta.norm();
        if !(norm <= filt.divergence_guard) {
            return Err(Error::DivergenceDetected { step: k + 1, norm });
        }
        observations.push(y);
        thetas.push(theta.clone());
    }
    Ok(Trajectory {
        algorithm: filt.algorithm,
        thetas,
        chain: chain.clone(),
        observations,
        mu: filt.mu,
        epsilon: regime.epsilon(),
    })
}

/// Simulates the chain, the signals and the filter for `n_steps` steps.
pub fn run_tracking<R: Rng + ?Sized>(
    regime: &RegimeModel,
    signal: &SignalModel,
    filt: &FilterConfig,
    n_steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    check_dims(regime, signal, filt)?;
    let (chain, draws) = draw_inputs(regime, signal, n_steps, rng);
    run_on_inputs(regime, &chain, &draws, filt)
}

/// Runs several filters on identical chain and signal draws.
pub fn run_common<R: Rng + ?Sized>(
    regime: &RegimeModel,
    signal: &SignalModel,
    filters: &[FilterConfig],
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    for f in filters {
        check_dims(regime, signal, f)?;
    }
    let (chain, draws) = draw_inputs(regime, signal, n_steps, rng);
    filters
        .iter()
        .map(|f| run_on_inputs(regime, &chain, &draws, f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regime::GeneratorMatrix;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn three_state_regime(eps: f64) -> RegimeModel {
        let q = GeneratorMatrix::from_rows(&[
            vec![-0.6, 0.4, 0.2],
            vec![0.2, -0.5, 0.3],
            vec![0.4, 0.1, -0.5],
        ])
        .unwrap();
        RegimeModel::new(
            vec![v(&[-1.0]), v(&[0.0]), v(&[1.0])],
            q,
            eps,
            v(&[0.75, 0.125, 0.125]),
        )
        .unwrap()
    }

    #[test]
    fn sign_examples() {
        assert_eq!(sign(3.2), 1);
        assert_eq!(sign(-0.1), -1);
        assert_eq!(sign(0.0), 0);
        assert_eq!(sign(-0.0), 0);
    }

    #[test]
    fn se_step_examples() {
        assert_abs_diff_eq!(se_step(&v(&[0.0]), &v(&[1.0]), 0.5, 0.05).unwrap()[0], 0.05);
        let theta = v(&[0.3, -0.2]);
        let phi = v(&[1.0, 2.0]);
        let y = phi.dot(&theta);
        assert_eq!(se_step(&theta, &phi, y, 0.1).unwrap(), theta);
        let next = se_step(&v(&[0.0, 0.0]), &phi, -1.0, 0.1).unwrap();
        assert_abs_diff_eq!(next[0], -0.1);
        assert_abs_diff_eq!(next[1], -0.2);
        assert!(matches!(
            se_step(&v(&[0.0]), &phi, 1.0, 0.1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sr_step_examples() {
        assert_abs_diff_eq!(sr_step(&v(&[0.0]), &v(&[2.0]), 0.5, 0.1).unwrap()[0], 0.05);
        let theta = v(&[0.4, 1.0]);
        assert_eq!(sr_step(&theta, &v(&[0.0, 0.0]), 3.0, 0.1).unwrap(), theta);
        let next = sr_step(&v(&[0.0, 0.0]), &v(&[-1.0, 3.0]), 1.0, 0.1).unwrap();
        assert_abs_diff_eq!(next[0], -0.1);
        assert_abs_diff_eq!(next[1], 0.1);
    }

    #[test]
    fn lms_step_examples() {
        assert_abs_diff_eq!(lms_step(&v(&[0.0]), &v(&[1.0]), 0.5, 0.1).unwrap()[0], 0.05);
        let theta = v(&[0.4, 1.0]);
        let phi = v(&[2.0, -1.0]);
        assert_eq!(lms_step(&theta, &phi, phi.dot(&theta), 0.3).unwrap(), theta);
        assert_abs_diff_eq!(lms_step(&v(&[1.0]), &v(&[1.0]), 0.0, 0.5).unwrap()[0], 0.5);
    }

    #[test]
    fn zero_stepsize_freezes_estimate() {
        let regime = three_state_regime(0.03);
        let signal = SignalModel::gaussian(DMatrix::identity(1, 1), 0.25).unwrap();
        for alg in Algorithm::ALL {
            let filt = FilterConfig::new(alg, 0.0, v(&[0.3])).unwrap();
            let traj = run_tracking(&regime, &signal, &filt, 200, &mut stream(21, 0)).unwrap();
            assert!(traj.thetas.iter().all(|t| t[0] == 0.3));
        }
    }

    #[test]
    fn noiseless_constant_regressor_hand_stepped() {
        // Single state a = 1, φ ≡ 1, e ≡ 0.
        let q = GeneratorMatrix::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let regime = RegimeModel::new(vec![v(&[1.0]), v(&[2.0])], q, 0.0, v(&[1.0, 0.0])).unwrap();
        let n = 25;
        let chain = DiscretePath { indices: vec![0; n + 1] };
        let draws = SignalDraws {
            regressors: vec![v(&[1.0]); n],
            noise: vec![0.0; n],
        };
        let filt = FilterConfig::new(Algorithm::SignError, 0.05, v(&[0.0])).unwrap();
        let traj = run_on_inputs(&regime, &chain, &draws, &filt).unwrap();

        let mut expected = vec![0.0_f64];
        for _ in 0..n {
            let t = *expected.last().unwrap();
            let r = 1.0 - t;
            let s = if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 };
            expected.push(t + 0.05 * s);
        }
        for (k, (got, want)) in traj.thetas.iter().zip(&expected).enumerate() {
            assert_eq!(got[0], *want, "step {k}");
        }
        for k in 0..=20 {
            assert_abs_diff_eq!(traj.thetas[k][0], 0.05 * k as f64, epsilon = 1e-12);
        }
        for t in &traj.thetas[20..] {
            assert!([0.95, 1.0, 1.05].iter().any(|b| (t[0] - b).abs() < 1e-9), "{}", t[0]);
        }
    }

    #[test]
    fn lms_contracts_error_geometrically() {
        let q = GeneratorMatrix::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let regime = RegimeModel::new(vec![v(&[0.7]), v(&[2.0])], q, 0.0, v(&[1.0, 0.0])).unwrap();
        let n = 30;
        let chain = DiscretePath { indices: vec![0; n + 1] };
        let draws = SignalDraws {
            regressors: vec![v(&[1.0]); n],
            noise: vec![0.0; n],
        };
        let mu = 0.2;
        let filt = FilterConfig::new(Algorithm::Lms, mu, v(&[-1.0])).unwrap();
        let traj = run_on_inputs(&regime, &chain, &draws, &filt).unwrap();
        for w in traj.thetas.windows(2) {
            let (e0, e1) = (0.7 - w[0][0], 0.7 - w[1][0]);
            assert_abs_diff_eq!(e1, (1.0 - mu) * e0, epsilon = 1e-14);
        }
    }

    #[test]
    fn se_increment_bounded_by_stepsize_times_regressor() {
        let regime = three_state_regime(0.03);
        let signal = SignalModel::gaussian(DMatrix::identity(1, 1), 0.25).unwrap();
        let filt = FilterConfig::new(Algorithm::SignError, 0.05, v(&[0.0])).unwrap();
        let mut rng = stream(22, 0);
        let (chain, draws) = draw_inputs(&regime, &signal, 1000, &mut rng);
        let traj = run_on_inputs(&regime, &chain, &draws, &filt).unwrap();
        for (k, w) in traj.thetas.windows(2).enumerate() {
            let step = (&w[1] - &w[0]).norm();
            assert!(step <= 0.05 * draws.regressors[k].norm() + 1e-15);
        }
        assert_eq!(traj.thetas.len(), traj.observations.len() + 1);
        assert_eq!(traj.chain.len(), traj.thetas.len());
    }

    #[test]
    fn divergence_is_reported() {
        let regime = three_state_regime(0.03);
        let signal = SignalModel::gaussian(DMatrix::identity(1, 1), 0.25).unwrap();
        // LMS with a huge stepsize is unstable.
        let mut filt = FilterConfig::new(Algorithm::Lms, 50.0, v(&[0.0])).unwrap();
        filt.divergence_guard = 1e3;
        let err = run_tracking(&regime, &signal, &filt, 1000, &mut stream(23, 0)).unwrap_err();
        assert!(err.is_divergence());
    }

    #[test]
    fn dimension_mismatch_propagates() {
        let regime = three_state_regime(0.03);
        let signal = SignalModel::gaussian(DMatrix::identity(2, 2), 0.25).unwrap();
        let filt = FilterConfig::new(Algorithm::SignError, 0.05, v(&[0.0])).unwrap();
        assert!(matches!(
            run_tracking(&regime, &signal, &filt, 10, &mut stream(24, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn common_random_numbers_share_chain_and_observations() {
        let regime = three_state_regime(0.03);
        let signal = SignalModel::gaussian(DMatrix::identity(1, 1), 0.25).unwrap();
        let base = FilterConfig::new(Algorithm::SignError, 0.05, v(&[0.0])).unwrap();
        let filters: Vec<_> = Algorithm::ALL.iter().map(|&a| base.with_algorithm(a)).collect();
        let trajs = run_common(&regime, &signal, &filters, 500, &mut stream(25, 0)).unwrap();
        assert_eq!(trajs[0].chain, trajs[1].chain);
        assert_eq!(trajs[1].chain, trajs[2].chain);
        assert_eq!(trajs[0].observations, trajs[2].observations);
        // The chain alone is recoverable from the logged stream.
        let replay = sample_dtmc(&regime, 500, &mut stream(25, 0));
        assert_eq!(replay, trajs[0].chain);
        // A single-filter run consumes the stream identically.
        let solo = run_tracking(&regime, &signal, &filters[2], 500, &mut stream(25, 0)).unwrap();
        assert_eq!(solo, trajs[2]);
    }

    proptest! {
        #[test]
        fn sign_is_odd(x in -1e6f64..1e6) {
            prop_assert_eq!(sign(-x), -sign(x));
        }

        #[test]
        fn se_ignores_residual_scale(
            theta in proptest::collection::vec(-3.0f64..3.0, 2),
            phi in proptest::collection::vec(-3.0f64..3.0, 2),
            s in -5.0f64..5.0,
            c in 1e-3f64..1e3,
        ) {
            let theta = DVector::from_vec(theta);
            let phi = DVector::from_vec(phi);
            let pred = phi.dot(&theta);
            let a = se_step(&theta, &phi, pred + s, 0.1).unwrap();
            let b = se_step(&theta, &phi, pred + c * s, 0.1).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn se_increment_norm_is_constant(
            theta in proptest::collection::vec(-3.0f64..3.0, 3),
            phi in proptest::collection::vec(-3.0f64..3.0, 3),
            y in -5.0f64..5.0,
            mu in 1e-3f64..1.0,
        ) {
            let theta = DVector::from_vec(theta);
            let phi = DVector::from_vec(phi);
            prop_assume!(y - phi.dot(&theta) != 0.0);
            let next = se_step(&theta, &phi, y, mu).unwrap();
            let inc = (next - &theta).norm();
            prop_assert!((inc - mu * phi.norm()).abs() <= 1e-12 * (1.0 + theta.norm()));
        }

        #[test]
        fn equal_seeds_equal_trajectories(seed in any::<u64>()) {
            let regime = three_state_regime(0.1);
            let signal = SignalModel::gaussian(DMatrix::identity(1, 1), 0.25).unwrap();
            let filt = FilterConfig::new(Algorithm::SignError, 0.05, v(&[0.0])).unwrap();
            let a = run_tracking(&regime, &signal, &filt, 100, &mut stream(seed, 0)).unwrap();
            let b = run_tracking(&regime, &signal, &filt, 100, &mut stream(seed, 0)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
