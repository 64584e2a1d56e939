//! Deterministic and diffusion limits of the sign-error recursion.
//!
//! The effective matrix `A` linearises the mean update field
//! `x ↦ E[φ sgn(φᵀx + e)]` at `x = 0`. Every limit object is built from it:
//!
//! - switched ODE `θ' = A_α (a_α − θ)` driven by the chain,
//! - slow-chain ODE averaged under the initial law,
//! - fast-chain ODE averaged under the stationary law,
//! - OU limits `dz = −A z dt + Σ̃^{1/2} dw` of the `1/√μ`-scaled errors, with
//!   stationary covariance `S` solving `A S + S Aᵀ = Σ̃`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::regime::{stationary_distribution, ContinuousPath, RegimeModel};
use crate::rng::{purpose, substream};
use crate::signal::{RegressorDist, SignalModel};

const MC_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EffectiveMatrixMethod {
    /// `√(2/π) Σ_φ / σ_e`, exact for Gaussian regressors and noise.
    ClosedFormGaussian,
    /// Central finite differences of the Monte Carlo mean field, all columns
    /// evaluated on the same draws.
    MonteCarlo { samples: usize, fd_step: f64, seed: u64 },
}

/// Monte Carlo estimate of the effective matrix with entrywise standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveMatrixEstimate {
    pub matrix: DMatrix<f64>,
    pub std_err: DMatrix<f64>,
}

pub fn effective_matrix(signal: &SignalModel, method: EffectiveMatrixMethod) -> Result<DMatrix<f64>> {
    match method {
        EffectiveMatrixMethod::ClosedFormGaussian => {
            if !signal.is_gaussian() {
                return Err(Error::NonGaussianClosedForm);
            }
            Ok(signal.regressor_cov() * ((2.0 / PI).sqrt() / signal.noise_std()))
        }
        EffectiveMatrixMethod::MonteCarlo { samples, fd_step, seed } => {
            let est = effective_matrix_monte_carlo(signal, samples, fd_step, seed)?;
            let norm = est.matrix.norm();
            let worst = linalg::max_abs(&est.std_err);
            if !(worst <= 0.05 * norm) {
                return Err(Error::MonteCarloVarianceTooHigh { std_err: worst, norm });
            }
            Ok(est.matrix)
        }
    }
}

/// Column `j` is `(m(h e_j) − m(−h e_j)) / 2h` with
/// `m(x) = E[φ sgn(φᵀx + e)]`, estimated on shared draws.
pub fn effective_matrix_monte_carlo(
    signal: &SignalModel,
    samples: usize,
    fd_step: f64,
    seed: u64,
) -> Result<EffectiveMatrixEstimate> {
    if samples < 2 {
        return Err(Error::InvalidParameter("need at least 2 Monte Carlo samples".into()));
    }
    if !(fd_step > 0.0) || !fd_step.is_finite() {
        return Err(Error::InvalidParameter(format!("fd_step must be positive, got {fd_step}")));
    }
    let r = signal.dim();
    let n_chunks = samples.div_ceil(MC_CHUNK);
    let partials: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, purpose::MONTE_CARLO, c as u64);
            let count = MC_CHUNK.min(samples - c * MC_CHUNK);
            let mut sum = DMatrix::zeros(r, r);
            let mut sum_sq = DMatrix::zeros(r, r);
            let mut phi = DVector::zeros(r);
            for _ in 0..count {
                let e = signal.sample_into(&mut rng, &mut phi);
                for j in 0..r {
                    let shift = fd_step * phi[j];
                    let diff = f64::from(crate::filter::sign(shift + e) - crate::filter::sign(e - shift));
                    if diff != 0.0 {
                        let w = diff / (2.0 * fd_step);
                        for i in 0..r {
                            let x = phi[i] * w;
                            sum[(i, j)] += x;
                            sum_sq[(i, j)] += x * x;
                        }
                    }
                }
            }
            (sum, sum_sq)
        })
        .collect();
    let mut sum = DMatrix::zeros(r, r);
    let mut sum_sq = DMatrix::zeros(r, r);
    for (s, s2) in &partials {
        sum += s;
        sum_sq += s2;
    }
    let n = samples as f64;
    let matrix = &sum / n;
    let std_err = DMatrix::from_fn(r, r, |i, j| {
        let m = matrix[(i, j)];
        ((sum_sq[(i, j)] / n - m * m).max(0.0) / (n - 1.0)).sqrt()
    });
    Ok(EffectiveMatrixEstimate { matrix, std_err })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    /// `ε = O(μ)`: the chain survives in the limit.
    Switched,
    /// `ε ≪ μ`: the chain freezes at its initial law.
    Slow,
    /// `ε ≫ μ`: the chain averages out under its stationary law.
    Fast,
}

/// Per-state effective matrices plus what the regime kind needs to average
/// them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitSystem {
    states: Vec<DVector<f64>>,
    matrices: Vec<DMatrix<f64>>,
    kind: RegimeKind,
    /// Initial law (slow) or stationary law (fast); absent when switched.
    weights: Option<DVector<f64>>,
}

impl LimitSystem {
    pub fn new(
        states: Vec<DVector<f64>>,
        matrices: Vec<DMatrix<f64>>,
        kind: RegimeKind,
        weights: Option<DVector<f64>>,
    ) -> Result<Self> {
        if states.is_empty() || states.len() != matrices.len() {
            return Err(Error::InvalidParameter(format!(
                "{} states but {} matrices",
                states.len(),
                matrices.len()
            )));
        }
        let r = states[0].len();
        for (i, (a, m)) in states.iter().zip(&matrices).enumerate() {
            if a.len() != r || m.nrows() != r || m.ncols() != r {
                return Err(Error::DimensionMismatch {
                    expected: r,
                    found: if a.len() != r { a.len() } else { m.nrows() },
                });
            }
            if !linalg::is_positive_stable(m) {
                return Err(Error::NotStable { state: i });
            }
        }
        match (kind, &weights) {
            (RegimeKind::Switched, _) => {}
            (_, Some(w)) => crate::regime::validate_distribution(w, states.len())?,
            (_, None) => {
                return Err(Error::InvalidParameter(format!("{kind:?} limit needs a state distribution")));
            }
        }
        Ok(Self {
            states,
            matrices,
            kind,
            weights,
        })
    }

    /// One shared matrix `a` for every state; weights taken from the regime
    /// (initial law for slow, stationary law for fast).
    pub fn from_regime(regime: &RegimeModel, a: &DMatrix<f64>, kind: RegimeKind) -> Result<Self> {
        let weights = match kind {
            RegimeKind::Switched => None,
            RegimeKind::Slow => Some(regime.initial_dist().clone()),
            RegimeKind::Fast => Some(stationary_distribution(regime.generator())?),
        };
        Self::new(
            regime.states().to_vec(),
            vec![a.clone(); regime.num_states()],
            kind,
            weights,
        )
    }

    pub fn kind(&self) -> RegimeKind {
        self.kind
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn weights(&self) -> Option<&DVector<f64>> {
        self.weights.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// `A_i (a_i − θ)`.
    pub fn switched_field(&self, state: usize, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let a = self.states.get(state).ok_or(Error::UnknownState(state))?;
        self.check_dim(theta)?;
        Ok(&self.matrices[state] * (a - theta))
    }

    /// `Σ_i p0_i A_i (a_i − θ)`.
    pub fn slow_field(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.expect_kind(RegimeKind::Slow)?;
        self.averaged_field(theta)
    }

    /// `Σ_j ν_j A_j (a_j − θ)`.
    pub fn fast_field(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.expect_kind(RegimeKind::Fast)?;
        self.averaged_field(theta)
    }

    /// Vector field of the system's kind; `state` is only read when switched.
    pub fn field(&self, state: usize, theta: &DVector<f64>) -> Result<DVector<f64>> {
        match self.kind {
            RegimeKind::Switched => self.switched_field(state, theta),
            RegimeKind::Slow | RegimeKind::Fast => self.averaged_field(theta),
        }
    }

    fn averaged_field(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(theta)?;
        let w = self.weights.as_ref().expect("validated at construction");
        let mut out = DVector::zeros(self.dim());
        for ((a, m), &p) in self.states.iter().zip(&self.matrices).zip(w.iter()) {
            if p != 0.0 {
                out += m * (a - theta) * p;
            }
        }
        Ok(out)
    }

    /// Drift matrix of the averaged dynamics: `A^(*)` (slow) or `Ā` (fast).
    pub fn averaged_matrix(&self) -> Result<DMatrix<f64>> {
        let w = self
            .weights
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("switched limit has no averaged matrix".into()))?;
        let r = self.dim();
        Ok(self
            .matrices
            .iter()
            .zip(w.iter())
            .fold(DMatrix::zeros(r, r), |acc, (m, &p)| acc + m * p))
    }

    /// Zero of the averaged field. Slow/fast kinds only.
    pub fn equilibrium(&self) -> Result<DVector<f64>> {
        let w = self
            .weights
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("switched limit has one equilibrium per state".into()))?;
        let mut rhs = DVector::zeros(self.dim());
        for ((a, m), &p) in self.states.iter().zip(&self.matrices).zip(w.iter()) {
            rhs += m * a * p;
        }
        linalg::solve(self.averaged_matrix()?, &rhs)
    }

    fn expect_kind(&self, kind: RegimeKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "field requires a {kind:?} system, got {:?}",
                self.kind
            )))
        }
    }

    fn check_dim(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: theta.len(),
            });
        }
        Ok(())
    }
}

/// Values of a path on the grid `times`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledPath {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

fn rk4_step<F>(f: &F, theta: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = f(theta)?;
    let k2 = f(&(theta + &k1 * (h / 2.0)))?;
    let k3 = f(&(theta + &k2 * (h / 2.0)))?;
    let k4 = f(&(theta + &k3 * h))?;
    Ok(theta + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

fn uniform_grid(dt: f64, horizon: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidParameter(format!("horizon must be >= 0, got {horizon}")));
    }
    let n = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
    Ok((0..=n).map(|k| (k as f64 * dt).min(horizon)).collect())
}

/// Classical RK4 for the system's limit ODE on `[0, horizon]`.
///
/// For a switched system the regime is frozen on each substep and every jump
/// of `chain` becomes a step boundary, so the solution keeps fourth-order
/// accuracy piecewise. Output is sampled on the uniform grid `k·dt`.
pub fn integrate_ode(
    sys: &LimitSystem,
    chain: Option<&ContinuousPath>,
    theta0: &DVector<f64>,
    dt: f64,
    horizon: f64,
) -> Result<SampledPath> {
    sys.check_dim(theta0)?;
    let times = uniform_grid(dt, horizon)?;
    let chain = match sys.kind {
        RegimeKind::Switched => {
            let c = chain.ok_or_else(|| Error::InvalidParameter("switched ODE needs a driving chain".into()))?;
            if c.horizon < horizon * (1.0 - 1e-12) {
                return Err(Error::InvalidParameter(format!(
                    "chain covers [0, {}] but the ODE runs to {horizon}",
                    c.horizon
                )));
            }
            Some(c)
        }
        _ => None,
    };
    let mut values = Vec::with_capacity(times.len());
    let mut theta = theta0.clone();
    values.push(theta.clone());
    let mut jump_idx = 0;
    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let mut t = t0;
        match chain {
            Some(c) => {
                while jump_idx < c.jumps.len() && c.jumps[jump_idx].0 <= t0 {
                    jump_idx += 1;
                }
                let mut breaks: Vec<f64> = c.jumps[jump_idx..]
                    .iter()
                    .map(|&(s, _)| s)
                    .take_while(|&s| s < t1)
                    .collect();
                breaks.push(t1);
                for b in breaks {
                    let h = b - t;
                    if h > 0.0 {
                        let state = c.state_at(t);
                        theta = rk4_step(&|x: &DVector<f64>| sys.switched_field(state, x), &theta, h)?;
                    }
                    t = b;
                }
            }
            None => {
                theta = rk4_step(&|x: &DVector<f64>| sys.averaged_field(x), &theta, t1 - t0)?;
            }
        }
        values.push(theta.clone());
    }
    Ok(SampledPath { times, values })
}

/// Σ̃ together with a square root `S` with `S Sᵀ = Σ̃`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseCovariance {
    pub sigma_tilde: DMatrix<f64>,
    pub sqrt: DMatrix<f64>,
}

impl NoiseCovariance {
    pub fn new(sigma_tilde: DMatrix<f64>) -> Result<Self> {
        let scale = linalg::max_abs(&sigma_tilde).max(1.0);
        if !sigma_tilde.is_square() || (&sigma_tilde - sigma_tilde.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidParameter("noise covariance must be symmetric".into()));
        }
        let sqrt = matrix_sqrt_psd(&sigma_tilde)?;
        Ok(Self { sigma_tilde, sqrt })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseCovarianceMethod {
    /// Independent signals with continuous noise: `Σ̃ = E[φφᵀ]`.
    ClosedFormIid,
    /// `C_0 + Σ_{j=1}^{L} (C_j + C_jᵀ)` from lagged sample covariances of
    /// `ϖ_k = φ_k sgn(e_k)`.
    Empirical { lag_cutoff: usize, samples: usize, seed: u64 },
}

pub fn noise_covariance(signal: &SignalModel, method: NoiseCovarianceMethod) -> Result<NoiseCovariance> {
    match method {
        NoiseCovarianceMethod::ClosedFormIid => match signal.regressor() {
            RegressorDist::Gaussian { cov } => NoiseCovariance::new(cov.clone()),
            RegressorDist::TruncatedGaussian { .. } => Err(Error::NonGaussianClosedForm),
        },
        NoiseCovarianceMethod::Empirical {
            lag_cutoff,
            samples,
            seed,
        } => {
            let lags = lag_covariances(signal, lag_cutoff, samples, seed)?;
            let mut total = lags[0].clone();
            for c in &lags[1..] {
                total += c + c.transpose();
            }
            let total = linalg::symmetrize(&total);
            let eig = total.clone().symmetric_eigen();
            let min = eig.eigenvalues.min();
            if min < -1e-10 {
                return Err(Error::NotPositiveSemidefinite { eigenvalue: min });
            }
            NoiseCovariance::new(total)
        }
    }
}

/// `C_j = mean_k ϖ_{k+j} ϖ_kᵀ` for `j = 0..=max_lag`.
pub fn lag_covariances(signal: &SignalModel, max_lag: usize, samples: usize, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    if samples <= max_lag + 1 {
        return Err(Error::InvalidParameter("need more samples than lags".into()));
    }
    let r = signal.dim();
    let mut rng = substream(seed, purpose::MONTE_CARLO, u64::MAX);
    let mut phi = DVector::zeros(r);
    let series: Vec<DVector<f64>> = (0..samples)
        .map(|_| {
            let e = signal.sample_into(&mut rng, &mut phi);
            &phi * f64::from(crate::filter::sign(e))
        })
        .collect();
    Ok((0..=max_lag)
        .map(|j| {
            let m = samples - j;
            let mut c = DMatrix::zeros(r, r);
            for k in 0..m {
                c.ger(1.0, &series[k + j], &series[k], 1.0);
            }
            c / m as f64
        })
        .collect())
}

/// Symmetric square root through the eigendecomposition. Eigenvalues in
/// `[-1e-10, 0)` are clamped to zero.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = linalg::symmetrize(m).symmetric_eigen();
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -1e-10) {
        return Err(Error::NotPositiveSemidefinite { eigenvalue: bad });
    }
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let v = &eig.eigenvectors;
    Ok(linalg::symmetrize(&(v * roots * v.transpose())))
}

/// Solves `A S + S Aᵀ = Σ̃` through the vectorised system
/// `(I ⊗ A + A ⊗ I) vec(S) = vec(Σ̃)`.
///
/// `A` must have all eigenvalues in the open right half-plane (the OU drift is
/// `−A`).
pub fn lyapunov_solve(a: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = a.nrows();
    if !a.is_square() || sigma.shape() != (r, r) {
        return Err(Error::DimensionMismatch {
            expected: r,
            found: sigma.nrows(),
        });
    }
    if !linalg::is_positive_stable(a) {
        return Err(Error::SingularLyapunov);
    }
    let eye = DMatrix::<f64>::identity(r, r);
    let system = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = DVector::from_column_slice(sigma.as_slice());
    let x = linalg::solve(system, &rhs).map_err(|_| Error::SingularLyapunov)?;
    Ok(linalg::symmetrize(&DMatrix::from_column_slice(r, r, x.as_slice())))
}

/// Drift of an OU simulation: one matrix, or one per chain state.
#[derive(Debug, Clone, Copy)]
pub enum OuDrift<'a> {
    Constant(&'a DMatrix<f64>),
    Switched {
        matrices: &'a [DMatrix<f64>],
        chain: &'a ContinuousPath,
    },
}

/// Euler-Maruyama for `dz = −A z dt + S dW`.
///
/// The limit theorems write the noise as `−Σ̃^{1/2} dw`; Brownian motion is
/// symmetric so the `+` sign used here gives the same law.
pub fn simulate_ou<R: Rng + ?Sized>(
    drift: OuDrift<'_>,
    sqrt_cov: &DMatrix<f64>,
    z0: &DVector<f64>,
    dt: f64,
    horizon: f64,
    rng: &mut R,
) -> Result<SampledPath> {
    let r = z0.len();
    if sqrt_cov.shape() != (r, r) {
        return Err(Error::DimensionMismatch {
            expected: r,
            found: sqrt_cov.nrows(),
        });
    }
    if let OuDrift::Switched { chain, .. } = drift {
        if chain.horizon < horizon * (1.0 - 1e-12) {
            return Err(Error::InvalidParameter("driving chain shorter than the horizon".into()));
        }
    }
    let times = uniform_grid(dt, horizon)?;
    let mut values = Vec::with_capacity(times.len());
    let mut z = z0.clone();
    let mut xi = DVector::zeros(r);
    values.push(z.clone());
    for w in times.windows(2) {
        let h = w[1] - w[0];
        let a = match drift {
            OuDrift::Constant(a) => a,
            OuDrift::Switched { matrices, chain } => {
                let s = chain.state_at(w[0]);
                matrices.get(s).ok_or(Error::UnknownState(s))?
            }
        };
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let dz = a * &z * (-h) + sqrt_cov * &xi * h.sqrt();
        z += dz;
        values.push(z.clone());
    }
    Ok(SampledPath { times, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regime::GeneratorMatrix;
    use crate::rng::stream;
    use crate::signal::NoiseDist;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn diag(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&v(xs))
    }

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn reference_states() -> Vec<DVector<f64>> {
        vec![v(&[-1.0]), v(&[0.0]), v(&[1.0])]
    }

    #[test]
    fn closed_form_effective_matrix() {
        let s = SignalModel::gaussian(DMatrix::identity(1, 1), 0.25).unwrap();
        let a = effective_matrix(&s, EffectiveMatrixMethod::ClosedFormGaussian).unwrap();
        assert_abs_diff_eq!(a[(0, 0)], (2.0 / PI).sqrt() / 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(a[(0, 0)], 1.5957691216057308, epsilon = 1e-12);
        // doubling σ_e halves A
        let s2 = SignalModel::gaussian(DMatrix::identity(1, 1), 1.0).unwrap();
        let a2 = effective_matrix(&s2, EffectiveMatrixMethod::ClosedFormGaussian).unwrap();
        assert_eq!(a2[(0, 0)] * 2.0, a[(0, 0)]);

        let trunc = SignalModel::new(
            RegressorDist::Gaussian {
                cov: DMatrix::identity(1, 1),
            },
            NoiseDist::TruncatedGaussian {
                variance: 1.0,
                clip: 3.0,
            },
        )
        .unwrap();
        assert_eq!(
            effective_matrix(&trunc, EffectiveMatrixMethod::ClosedFormGaussian),
            Err(Error::NonGaussianClosedForm)
        );
    }

    #[test]
    fn monte_carlo_effective_matrix_matches_closed_form() {
        let s = SignalModel::gaussian(diag(&[1.0, 4.0]), 1.0).unwrap();
        let closed = effective_matrix(&s, EffectiveMatrixMethod::ClosedFormGaussian).unwrap();
        let mc = effective_matrix(
            &s,
            EffectiveMatrixMethod::MonteCarlo {
                samples: 2_000_000,
                fd_step: 0.01,
                seed: 5,
            },
        )
        .unwrap();
        let tol = 0.03 * closed.norm();
        assert!((mc - closed).amax() < tol);
    }

    #[test]
    fn monte_carlo_variance_guard() {
        let s = SignalModel::gaussian(DMatrix::identity(1, 1), 0.25).unwrap();
        let r = effective_matrix(
            &s,
            EffectiveMatrixMethod::MonteCarlo {
                samples: 200,
                fd_step: 0.01,
                seed: 5,
            },
        );
        assert!(matches!(r, Err(Error::MonteCarloVarianceTooHigh { .. })), "{r:?}");
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let s = SignalModel::gaussian(DMatrix::identity(2, 2), 0.25).unwrap();
        let a = effective_matrix_monte_carlo(&s, 300_000, 0.01, 9).unwrap();
        let b = effective_matrix_monte_carlo(&s, 300_000, 0.01, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unstable_matrix_rejected() {
        let r = LimitSystem::new(reference_states(), vec![scalar(1.0), scalar(-1.0), scalar(1.0)], RegimeKind::Switched, None);
        assert_eq!(r, Err(Error::NotStable { state: 1 }));
    }

    #[test]
    fn switched_field_examples() {
        let sys = LimitSystem::new(vec![v(&[1.0]), v(&[3.0])], vec![scalar(2.0), scalar(1.0)], RegimeKind::Switched, None).unwrap();
        assert_eq!(sys.switched_field(0, &v(&[1.0])).unwrap(), v(&[0.0]));
        assert_eq!(sys.switched_field(0, &v(&[0.0])).unwrap(), v(&[2.0]));
        assert_eq!(sys.switched_field(5, &v(&[0.0])), Err(Error::UnknownState(5)));
    }

    #[test]
    fn slow_field_examples() {
        let q = GeneratorMatrix::from_rows(&[vec![-0.6, 0.4, 0.2], vec![0.2, -0.5, 0.3], vec![0.4, 0.1, -0.5]]).unwrap();
        let regime = RegimeModel::new(reference_states(), q, 0.0025, v(&[0.75, 0.125, 0.125])).unwrap();
        let a = scalar((2.0 / PI).sqrt() / 0.5);
        let sys = LimitSystem::from_regime(&regime, &a, RegimeKind::Slow).unwrap();
        assert_abs_diff_eq!(sys.slow_field(&v(&[-0.625])).unwrap()[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sys.equilibrium().unwrap()[0], -0.625, epsilon = 1e-12);
        let f = sys.slow_field(&v(&[0.2])).unwrap()[0];
        assert_abs_diff_eq!(f, a[(0, 0)] * (-0.625 - 0.2), epsilon = 1e-14);
        assert!(sys.fast_field(&v(&[0.0])).is_err());

        let unit = LimitSystem::new(reference_states(), vec![scalar(1.5); 3], RegimeKind::Slow, Some(v(&[0.0, 0.0, 1.0]))).unwrap();
        let sw = LimitSystem::new(reference_states(), vec![scalar(1.5); 3], RegimeKind::Switched, None).unwrap();
        assert_eq!(unit.slow_field(&v(&[0.3])).unwrap(), sw.switched_field(2, &v(&[0.3])).unwrap());
    }

    #[test]
    fn fast_field_examples() {
        let q = GeneratorMatrix::from_rows(&[vec![-0.6, 0.4, 0.2], vec![0.2, -0.5, 0.3], vec![0.4, 0.1, -0.5]]).unwrap();
        let regime = RegimeModel::new(reference_states(), q, 0.2, v(&[0.75, 0.125, 0.125])).unwrap();
        let sys = LimitSystem::from_regime(&regime, &scalar(1.0), RegimeKind::Fast).unwrap();
        let eq = sys.equilibrium().unwrap()[0];
        assert!(eq.abs() < 1e-12);
        assert!(sys.fast_field(&v(&[eq])).unwrap()[0].abs() < 1e-12);
        for theta in [-2.0, -0.5, 0.0, 0.7] {
            assert_abs_diff_eq!(sys.fast_field(&v(&[theta])).unwrap()[0], -theta, epsilon = 1e-12);
        }
        let single = LimitSystem::new(vec![v(&[0.4])], vec![scalar(2.0)], RegimeKind::Fast, Some(v(&[1.0]))).unwrap();
        let sw = LimitSystem::new(vec![v(&[0.4])], vec![scalar(2.0)], RegimeKind::Switched, None).unwrap();
        assert_eq!(single.fast_field(&v(&[0.1])).unwrap(), sw.switched_field(0, &v(&[0.1])).unwrap());
    }

    fn one_state_system() -> LimitSystem {
        LimitSystem::new(vec![v(&[1.0])], vec![scalar(1.0)], RegimeKind::Switched, None).unwrap()
    }

    fn max_error_vs_exponential(dt: f64) -> f64 {
        let sys = one_state_system();
        let chain = ContinuousPath::constant(0, 5.0);
        let path = integrate_ode(&sys, Some(&chain), &v(&[0.0]), dt, 5.0).unwrap();
        path.times
            .iter()
            .zip(&path.values)
            .map(|(t, x)| (x[0] - (1.0 - (-t).exp())).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn integrate_ode_closed_form() {
        assert!(max_error_vs_exponential(1e-3) <= 1e-8);
    }

    #[test]
    fn integrate_ode_is_fourth_order() {
        let coarse = max_error_vs_exponential(0.2);
        let fine = max_error_vs_exponential(0.1);
        assert!(coarse / fine >= 12.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn integrate_ode_aligns_steps_with_jumps() {
        // Jump off-grid at t = 0.55; the piecewise closed form must be matched to
        // RK4 accuracy, which fails if the step straddles the jump.
        let sys = LimitSystem::new(vec![v(&[1.0]), v(&[-1.0])], vec![scalar(2.0), scalar(0.5)], RegimeKind::Switched, None).unwrap();
        let chain = ContinuousPath {
            initial: 0,
            jumps: vec![(0.55, 1)],
            horizon: 2.0,
        };
        let path = integrate_ode(&sys, Some(&chain), &v(&[0.0]), 0.01, 2.0).unwrap();
        let at_jump = 1.0 - (-2.0 * 0.55_f64).exp();
        for (t, x) in path.times.iter().zip(&path.values) {
            let exact = if *t < 0.55 {
                1.0 - (-2.0 * t).exp()
            } else {
                -1.0 + (at_jump + 1.0) * (-0.5 * (t - 0.55)).exp()
            };
            assert!((x[0] - exact).abs() < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn slow_ode_approaches_initial_mean_monotonically() {
        let a = (2.0 / PI).sqrt() / 0.5;
        let sys = LimitSystem::new(reference_states(), vec![scalar(a); 3], RegimeKind::Slow, Some(v(&[0.75, 0.125, 0.125]))).unwrap();
        let path = integrate_ode(&sys, None, &v(&[0.0]), 0.01, 10.0).unwrap();
        for w in path.values.windows(2) {
            assert!(w[1][0] < w[0][0]);
        }
        for (t, x) in path.times.iter().zip(&path.values) {
            let exact = -0.625 * (1.0 - (-a * t).exp());
            assert!((x[0] - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn switched_ode_requires_chain() {
        assert!(integrate_ode(&one_state_system(), None, &v(&[0.0]), 0.1, 1.0).is_err());
        let short = ContinuousPath::constant(0, 0.5);
        assert!(integrate_ode(&one_state_system(), Some(&short), &v(&[0.0]), 0.1, 1.0).is_err());
    }

    #[test]
    fn noise_covariance_closed_and_empirical() {
        for cov in [DMatrix::identity(1, 1), diag(&[1.0, 4.0])] {
            let s = SignalModel::gaussian(cov.clone(), 0.25).unwrap();
            let closed = noise_covariance(&s, NoiseCovarianceMethod::ClosedFormIid).unwrap();
            assert_eq!(closed.sigma_tilde, cov);
            let emp = noise_covariance(
                &s,
                NoiseCovarianceMethod::Empirical {
                    lag_cutoff: 0,
                    samples: 1_000_000,
                    seed: 3,
                },
            )
            .unwrap();
            assert!((&emp.sigma_tilde - &cov).amax() < 0.02 * linalg::max_abs(&cov));
        }
    }

    #[test]
    fn lag_terms_vanish_for_iid_signals() {
        let s = SignalModel::gaussian(DMatrix::identity(1, 1), 1.0).unwrap();
        let n = 1_000_000;
        let lags = lag_covariances(&s, 4, n, 17).unwrap();
        for (j, c) in lags.iter().enumerate().skip(1) {
            let se = 1.0 / ((n - j) as f64).sqrt();
            assert!(c[(0, 0)].abs() < 4.0 * se, "lag {j}: {}", c[(0, 0)]);
        }
    }

    #[test]
    fn matrix_sqrt_examples() {
        assert_abs_diff_eq!(matrix_sqrt_psd(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3), epsilon = 1e-14);
        assert_abs_diff_eq!(matrix_sqrt_psd(&diag(&[4.0, 9.0])).unwrap(), diag(&[2.0, 3.0]), epsilon = 1e-14);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.5, -0.3, 0.7, 1.1, 0.0, -1.2, 0.4]);
        let psd = &b * b.transpose();
        let s = matrix_sqrt_psd(&psd).unwrap();
        assert!((&s * s.transpose() - &psd).amax() <= 1e-10);
        // rank deficient
        let low = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let s = matrix_sqrt_psd(&low).unwrap();
        assert!((&s * s.transpose() - &low).amax() <= 1e-10);
        assert!(matches!(
            matrix_sqrt_psd(&diag(&[1.0, -0.1])),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn lyapunov_examples() {
        let s = lyapunov_solve(&scalar(2.5), &scalar(3.0)).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 3.0 / 5.0, epsilon = 1e-15);
        let s = lyapunov_solve(&DMatrix::identity(2, 2), &diag(&[2.0, 4.0])).unwrap();
        assert_abs_diff_eq!(s, diag(&[1.0, 2.0]), epsilon = 1e-15);
        assert_eq!(lyapunov_solve(&scalar(-1.0), &scalar(1.0)), Err(Error::SingularLyapunov));
    }

    #[test]
    fn ou_deterministic_decay() {
        let path = simulate_ou(OuDrift::Constant(&scalar(1.0)), &scalar(0.0), &v(&[1.0]), 1e-4, 2.0, &mut stream(1, 0)).unwrap();
        let err = path
            .times
            .iter()
            .zip(&path.values)
            .map(|(t, z)| (z[0] - (-t).exp()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-4);
    }

    fn pooled_tail_variance(a: f64, sigma: f64, paths: usize, horizon: f64, burn: f64, seed: u64) -> f64 {
        let dt = 0.01;
        let mut samples = Vec::new();
        for p in 0..paths {
            let path = simulate_ou(OuDrift::Constant(&scalar(a)), &scalar(sigma.sqrt()), &v(&[0.0]), dt, horizon, &mut stream(seed, p as u64)).unwrap();
            for (t, z) in path.times.iter().zip(&path.values) {
                if *t >= burn {
                    samples.push(z[0]);
                }
            }
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn ou_stationary_variance() {
        let var = pooled_tail_variance(1.0, 1.0, 200, 50.0, 10.0, 31);
        let expected = lyapunov_solve(&scalar(1.0), &scalar(1.0)).unwrap()[(0, 0)];
        assert_abs_diff_eq!(expected, 0.5);
        assert!((var / expected - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn ou_stiff_drift_stays_near_zero() {
        let var = pooled_tail_variance(20.0, 2.0, 200, 5.0, 1.0, 32);
        let expected = 2.0 / 40.0;
        assert!((var / expected - 1.0).abs() < 0.15, "variance {var}");
    }

    #[test]
    fn ou_switched_drift_uses_chain_state() {
        let mats = [scalar(1.0), scalar(100.0)];
        let chain = ContinuousPath {
            initial: 0,
            jumps: vec![(1.0, 1)],
            horizon: 2.0,
        };
        let path = simulate_ou(
            OuDrift::Switched { matrices: &mats, chain: &chain },
            &scalar(0.0),
            &v(&[1.0]),
            1e-3,
            2.0,
            &mut stream(2, 0),
        )
        .unwrap();
        let at_one = path.values[1000][0];
        assert!((at_one - (-1.0_f64).exp()).abs() < 1e-3);
        assert!(path.values.last().unwrap()[0].abs() < 1e-10);
    }

    fn stable_matrix() -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-1.0f64..1.0, 9).prop_map(|raw| {
            let m = DMatrix::from_row_slice(3, 3, &raw);
            // shift the spectrum into the right half-plane
            let shift = m.norm() + 0.1;
            m + DMatrix::identity(3, 3) * shift
        })
    }

    proptest! {
        #[test]
        fn lyapunov_residual_and_symmetry(a in stable_matrix(), raw in proptest::collection::vec(-1.0f64..1.0, 9)) {
            let b = DMatrix::from_row_slice(3, 3, &raw);
            let sigma = &b * b.transpose() + DMatrix::identity(3, 3) * 0.1;
            let s = lyapunov_solve(&a, &sigma).unwrap();
            let residual = (&a * &s + &s * a.transpose() - &sigma).amax();
            prop_assert!(residual <= 1e-10);
            prop_assert!((&s - s.transpose()).amax() <= 1e-12);
            prop_assert!(s.clone().symmetric_eigen().eigenvalues.min() > 0.0);
        }

        #[test]
        fn switched_field_is_affine(x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0, w in -5.0f64..5.0) {
            let sys = LimitSystem::new(
                vec![v(&[1.0, -2.0])],
                vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.3, -0.1, 1.0])],
                RegimeKind::Switched,
                None,
            ).unwrap();
            let t1 = v(&[x, y]);
            let t2 = v(&[z, w]);
            let lhs = sys.switched_field(0, &t1).unwrap() + sys.switched_field(0, &t2).unwrap() - sys.switched_field(0, &v(&[0.0, 0.0])).unwrap();
            let rhs = sys.switched_field(0, &(t1 + t2)).unwrap();
            prop_assert!((lhs - rhs).amax() <= 1e-12);
        }
    }
}
