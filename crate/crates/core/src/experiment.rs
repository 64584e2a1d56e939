//! Monte Carlo harness: MSE curves, deviation from the limit ODEs and
//! covariance of the scaled errors.
//!
//! Replication `i` always draws from the streams addressed by
//! `(master_seed, i)`, and every reduction runs in replication-index order, so
//! results are bitwise independent of the number of worker threads.

use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::{run_common, run_on_inputs, Algorithm, FilterConfig, SignalDraws, Trajectory};
use crate::limits::{
    effective_matrix, integrate_ode, lyapunov_solve, noise_covariance, EffectiveMatrixMethod, LimitSystem,
    NoiseCovarianceMethod, RegimeKind,
};
use crate::regime::{sample_dtmc_uniformized, RegimeModel};
use crate::rng::{purpose, stream, substream};
use crate::signal::SignalModel;

/// How the chain's transition scale follows the filter stepsize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coupling {
    /// `ε = c μ`.
    Proportional { c: f64 },
    /// `ε = μ^(1 + Δ)`.
    Slow { delta: f64 },
    /// `ε = μ^γ`.
    Fast { gamma: f64 },
}

impl Coupling {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Coupling::Proportional { c } => c >= 0.0 && c.is_finite(),
            Coupling::Slow { delta } => delta > 0.0 && delta.is_finite(),
            // γ = 1/2 is admitted so that ε = √μ can be run directly.
            Coupling::Fast { gamma } => (0.5..1.0).contains(&gamma),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("coupling out of range: {self:?}")))
        }
    }

    pub fn epsilon(&self, mu: f64) -> f64 {
        match *self {
            Coupling::Proportional { c } => c * mu,
            Coupling::Slow { delta } => mu.powf(1.0 + delta),
            Coupling::Fast { gamma } => mu.powf(gamma),
        }
    }

    pub fn regime_kind(&self) -> RegimeKind {
        match self {
            Coupling::Proportional { .. } => RegimeKind::Switched,
            Coupling::Slow { .. } => RegimeKind::Slow,
            Coupling::Fast { .. } => RegimeKind::Fast,
        }
    }

    /// Centering of the scaled error that has a diffusion limit under this
    /// coupling.
    pub fn centering(&self) -> Centering {
        match self {
            Coupling::Proportional { .. } => Centering::Chain,
            Coupling::Slow { .. } => Centering::InitialMean,
            Coupling::Fast { .. } => Centering::StationaryMean,
        }
    }
}

/// Everything needed to reproduce a Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub regime: RegimeModel,
    pub signal: SignalModel,
    pub filter: FilterConfig,
    pub coupling: Coupling,
    pub n_steps: usize,
    pub n_replications: usize,
    pub master_seed: u64,
    /// Overrides [`burn_in_default`].
    pub burn_in: Option<usize>,
}

impl Scenario {
    /// Builds a scenario, deriving the regime's `ε` from the coupling rule.
    pub fn new(
        regime: RegimeModel,
        signal: SignalModel,
        filter: FilterConfig,
        coupling: Coupling,
        n_steps: usize,
        n_replications: usize,
        master_seed: u64,
    ) -> Result<Self> {
        coupling.validate()?;
        if n_replications == 0 {
            return Err(Error::InvalidParameter("need at least one replication".into()));
        }
        let r = regime.dim();
        for found in [signal.dim(), filter.theta0.len()] {
            if found != r {
                return Err(Error::DimensionMismatch { expected: r, found });
            }
        }
        let regime = regime.with_epsilon(coupling.epsilon(filter.mu))?;
        Ok(Self {
            regime,
            signal,
            filter,
            coupling,
            n_steps,
            n_replications,
            master_seed,
            burn_in: None,
        })
    }

    pub fn mu(&self) -> f64 {
        self.filter.mu
    }

    pub fn epsilon(&self) -> f64 {
        self.regime.epsilon()
    }

    /// Same scenario at another stepsize; `ε` follows the coupling.
    pub fn with_mu(&self, mu: f64) -> Result<Self> {
        let mut filter = self.filter.clone();
        filter.mu = mu;
        let mut s = Self::new(
            self.regime.clone(),
            self.signal.clone(),
            filter,
            self.coupling,
            self.n_steps,
            self.n_replications,
            self.master_seed,
        )?;
        s.burn_in = self.burn_in;
        Ok(s)
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or_else(|| burn_in_default(self.mu()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Effective matrix: closed form when the signals are Gaussian, otherwise
    /// a seeded Monte Carlo estimate.
    pub fn effective_matrix(&self) -> Result<DMatrix<f64>> {
        match effective_matrix(&self.signal, EffectiveMatrixMethod::ClosedFormGaussian) {
            Err(Error::NonGaussianClosedForm) => effective_matrix(
                &self.signal,
                EffectiveMatrixMethod::MonteCarlo {
                    samples: 4_000_000,
                    fd_step: 0.01,
                    seed: self.master_seed,
                },
            ),
            other => other,
        }
    }

    pub fn noise_covariance(&self) -> Result<DMatrix<f64>> {
        let nc = match noise_covariance(&self.signal, NoiseCovarianceMethod::ClosedFormIid) {
            Err(Error::NonGaussianClosedForm) => noise_covariance(
                &self.signal,
                NoiseCovarianceMethod::Empirical {
                    lag_cutoff: 0,
                    samples: 1_000_000,
                    seed: self.master_seed,
                },
            )?,
            other => other?,
        };
        Ok(nc.sigma_tilde)
    }

    pub fn limit_system(&self) -> Result<LimitSystem> {
        LimitSystem::from_regime(&self.regime, &self.effective_matrix()?, self.coupling.regime_kind())
    }
}

/// `μ + ε + ε²/μ`: shape of the steady-state MSE bound with unit constant.
pub fn mse_bound(mu: f64, epsilon: f64) -> f64 {
    mu + epsilon + epsilon * epsilon / mu
}

/// `⌈5/μ⌉` iterates: five time constants of the `μ`-clock.
pub fn burn_in_default(mu: f64) -> usize {
    (5.0 / mu - 1e-9).ceil() as usize
}

/// Runs `f(i)` for every replication index, in parallel unless `threads` is
/// `Some(1)`. Output order and the reported error (lowest failing index) do
/// not depend on scheduling.
pub fn replicate<T, F>(n: usize, threads: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let run = || -> Vec<Result<T>> { (0..n).into_par_iter().map(&f).collect() };
    let results = match threads {
        Some(1) => (0..n).map(&f).collect(),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.in_replication(i)))
        .collect()
}

/// Runs every requested algorithm on replication `index` with shared draws.
pub fn run_replication(scenario: &Scenario, algorithms: &[Algorithm], index: usize) -> Result<Vec<Trajectory>> {
    let filters: Vec<FilterConfig> = algorithms.iter().map(|&a| scenario.filter.with_algorithm(a)).collect();
    run_common(
        &scenario.regime,
        &scenario.signal,
        &filters,
        scenario.n_steps,
        &mut stream(scenario.master_seed, index as u64),
    )
}

/// Per-iterate `E|α_n − θ_n|²` with standard errors (absent for one
/// replication).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseCurve {
    pub algorithm: Algorithm,
    pub mean: Vec<f64>,
    pub std_err: Option<Vec<f64>>,
}

impl MseCurve {
    /// Mean over the final half of the iterates after `burn_in`.
    pub fn steady_state(&self, burn_in: usize) -> Result<f64> {
        let tail = steady_state_window(&self.mean, burn_in)?;
        Ok(tail.iter().sum::<f64>() / tail.len() as f64)
    }

    /// Relative gap between the mean MSE of the third and fourth quarters of
    /// the post-burn-in window.
    pub fn plateau_gap(&self, burn_in: usize) -> Result<f64> {
        let tail = steady_state_window(&self.mean, burn_in)?;
        let half = tail.len() / 2;
        if half == 0 {
            return Err(Error::InvalidParameter("window too short for a plateau check".into()));
        }
        let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let (a, b) = (avg(&tail[..half]), avg(&tail[half..]));
        Ok((a - b).abs() / a.max(b))
    }
}

fn steady_state_window(values: &[f64], burn_in: usize) -> Result<&[f64]> {
    if burn_in >= values.len() {
        return Err(Error::InvalidParameter(format!(
            "burn-in {burn_in} leaves nothing of {} iterates",
            values.len()
        )));
    }
    let post = &values[burn_in..];
    Ok(&post[post.len() / 2..])
}

const BATCH: usize = 64;

/// Monte Carlo MSE curves for each algorithm under common random numbers.
pub fn mse_curve(scenario: &Scenario, algorithms: &[Algorithm], threads: Option<usize>) -> Result<Vec<MseCurve>> {
    let len = scenario.n_steps + 1;
    let k = algorithms.len();
    let mut sum = vec![vec![0.0; len]; k];
    let mut sum_sq = vec![vec![0.0; len]; k];
    let reps = scenario.n_replications;
    let mut start = 0;
    while start < reps {
        let end = (start + BATCH).min(reps);
        let batch = replicate(end - start, threads, |j| {
            let trajs = run_replication(scenario, algorithms, start + j)?;
            Ok(trajs.iter().map(|t| t.squared_errors(&scenario.regime)).collect::<Vec<_>>())
        })
        .map_err(|e| match e {
            Error::Replication { index, source } => Error::Replication {
                index: index + start,
                source,
            },
            other => other,
        })?;
        for per_alg in batch {
            for (a, errs) in per_alg.into_iter().enumerate() {
                for (n, x) in errs.into_iter().enumerate() {
                    sum[a][n] += x;
                    sum_sq[a][n] += x * x;
                }
            }
        }
        start = end;
    }
    let r = reps as f64;
    Ok(algorithms
        .iter()
        .enumerate()
        .map(|(a, &algorithm)| {
            let mean: Vec<f64> = sum[a].iter().map(|s| s / r).collect();
            let std_err = (reps > 1).then(|| {
                mean.iter()
                    .zip(&sum_sq[a])
                    .map(|(m, s2)| ((s2 / r - m * m).max(0.0) * r / (r - 1.0) / r).sqrt())
                    .collect()
            });
            MseCurve {
                algorithm,
                mean,
                std_err,
            }
        })
        .collect())
}

/// `θ^μ(t) = θ_⌊t/μ⌋`.
pub fn interpolate(traj: &Trajectory, t: f64) -> Result<&DVector<f64>> {
    let horizon = traj.n_steps() as f64 * traj.mu;
    if !(t >= 0.0) || !(t < horizon) {
        return Err(Error::OutOfHorizon { t, horizon });
    }
    let k = (t / traj.mu).floor() as usize;
    Ok(&traj.thetas[k.min(traj.n_steps() - 1)])
}

/// Running means `(x_0 + ... + x_n)/(n + 1)`.
pub fn cumulative_average(values: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut acc: Option<DVector<f64>> = None;
    values
        .iter()
        .enumerate()
        .map(|(n, x)| {
            let s = match acc.take() {
                Some(s) => s + x,
                None => x.clone(),
            };
            let avg = &s / (n + 1) as f64;
            acc = Some(s);
            avg
        })
        .collect()
}

/// Sup-norm deviation between the interpolated estimates and the limit ODE.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    pub mu: f64,
    pub epsilon: f64,
    pub horizon: f64,
    pub per_replication: Vec<f64>,
    pub mean: f64,
}

/// One replication of [`ode_deviation`]: the estimate path and the ODE
/// solution on the grid `t = kμ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationSample {
    pub trajectory: Trajectory,
    pub ode: Vec<DVector<f64>>,
    pub deviation: f64,
}

/// Chain and signals for deviation runs come from separate streams, and the
/// chain is drawn by uniformization, so runs at different stepsizes with the
/// same replication index share one continuous-time clock.
pub fn deviation_sample(scenario: &Scenario, dt_ode: f64, horizon: f64, index: usize) -> Result<DeviationSample> {
    let mu = scenario.mu();
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter("deviation needs a positive stepsize".into()));
    }
    if !(dt_ode > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidParameter("dt_ode and horizon must be positive".into()));
    }
    let n = (horizon / mu).round().max(1.0) as usize;
    let seed = scenario.master_seed;
    let chain = sample_dtmc_uniformized(
        &scenario.regime,
        n,
        &mut substream(seed, purpose::CHAIN, index as u64),
    );
    let draws = SignalDraws::sample(&scenario.signal, n, &mut substream(seed, purpose::SIGNAL, index as u64));
    let trajectory = run_on_inputs(&scenario.regime, &chain, &draws, &scenario.filter)?;

    let sys = scenario.limit_system()?;
    let substeps = (mu / dt_ode).round().max(1.0) as usize;
    let dt = mu / substeps as f64;
    let t_end = n as f64 * mu;
    let driving = chain.to_continuous(mu);
    let path = integrate_ode(&sys, Some(&driving), &scenario.filter.theta0, dt, t_end)?;
    let ode: Vec<DVector<f64>> = (0..=n).map(|k| path.values[(k * substeps).min(path.values.len() - 1)].clone()).collect();

    // θ^μ is constant on [kμ, (k+1)μ); the ODE is continuous, so the sup over
    // the interval is approached at one of its ends.
    let mut deviation: f64 = 0.0;
    for k in 0..n {
        let theta = &trajectory.thetas[k];
        deviation = deviation.max((theta - &ode[k]).norm()).max((theta - &ode[k + 1]).norm());
    }
    Ok(DeviationSample {
        trajectory,
        ode,
        deviation,
    })
}

pub fn ode_deviation(scenario: &Scenario, dt_ode: f64, horizon: f64, threads: Option<usize>) -> Result<DeviationReport> {
    let per_replication = replicate(scenario.n_replications, threads, |i| {
        deviation_sample(scenario, dt_ode, horizon, i).map(|s| s.deviation)
    })?;
    let mean = per_replication.iter().sum::<f64>() / per_replication.len() as f64;
    Ok(DeviationReport {
        mu: scenario.mu(),
        epsilon: scenario.epsilon(),
        horizon,
        per_replication,
        mean,
    })
}

/// Deviation at `μ` and `μ/2` on paired replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedDeviation {
    pub coarse: DeviationReport,
    pub fine: DeviationReport,
    /// Fraction of pairs whose deviation shrank when `μ` was halved.
    pub fraction_reduced: f64,
}

pub fn paired_deviation(scenario: &Scenario, dt_ode: f64, horizon: f64, threads: Option<usize>) -> Result<PairedDeviation> {
    let coarse = ode_deviation(scenario, dt_ode, horizon, threads)?;
    let fine = ode_deviation(&scenario.with_mu(scenario.mu() / 2.0)?, dt_ode, horizon, threads)?;
    let reduced = coarse
        .per_replication
        .iter()
        .zip(&fine.per_replication)
        .filter(|(c, f)| f < c)
        .count();
    Ok(PairedDeviation {
        fraction_reduced: reduced as f64 / coarse.per_replication.len() as f64,
        coarse,
        fine,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// `u_n = (α_n − θ_n)/√μ`.
    Chain,
    /// `v_n = (α_* − θ_n)/√μ`.
    InitialMean,
    /// `z_n = (ᾱ − θ_n)/√μ`.
    StationaryMean,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaledErrorSeries {
    pub centering: Centering,
    pub burn_in: usize,
    /// Values for iterates `burn_in, burn_in + 1, ...`.
    pub values: Vec<DVector<f64>>,
    /// Chain state at each retained iterate.
    pub states: Vec<usize>,
}

pub fn scaled_error(
    traj: &Trajectory,
    regime: &RegimeModel,
    centering: Centering,
    burn_in: usize,
) -> Result<ScaledErrorSeries> {
    if burn_in >= traj.thetas.len() {
        return Err(Error::InvalidParameter(format!(
            "burn-in {burn_in} not below series length {}",
            traj.thetas.len()
        )));
    }
    if !(traj.mu > 0.0) {
        return Err(Error::InvalidParameter("scaling needs a positive stepsize".into()));
    }
    let scale = 1.0 / traj.mu.sqrt();
    let fixed = match centering {
        Centering::Chain => None,
        Centering::InitialMean => Some(regime.initial_mean()),
        Centering::StationaryMean => Some(regime.stationary_mean()?),
    };
    let mut values = Vec::with_capacity(traj.thetas.len() - burn_in);
    let mut states = Vec::with_capacity(values.capacity());
    for n in burn_in..traj.thetas.len() {
        let s = traj.chain.indices[n];
        let center = fixed.as_ref().unwrap_or_else(|| regime.state(s));
        values.push((center - &traj.thetas[n]) * scale);
        states.push(s);
    }
    Ok(ScaledErrorSeries {
        centering,
        burn_in,
        values,
        states,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    count: usize,
    sum: DVector<f64>,
    outer: DMatrix<f64>,
}

impl Moments {
    fn new(r: usize) -> Self {
        Self {
            count: 0,
            sum: DVector::zeros(r),
            outer: DMatrix::zeros(r, r),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.count += 1;
        self.sum += x;
        self.outer.ger(1.0, x, x, 1.0);
    }

    fn merge(&mut self, other: &Moments) {
        self.count += other.count;
        self.sum += &other.sum;
        self.outer += &other.outer;
    }

    fn covariance(&self) -> Option<DMatrix<f64>> {
        if self.count < 2 {
            return None;
        }
        let n = self.count as f64;
        let mean = &self.sum / n;
        Some((&self.outer - &mean * mean.transpose() * n) / (n - 1.0))
    }
}

/// Empirical vs. Lyapunov covariance for one chain state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeCovariance {
    pub state: usize,
    pub samples: usize,
    pub empirical_cov: Option<DMatrix<f64>>,
    pub reference_cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionReport {
    pub centering: Centering,
    pub samples: usize,
    pub drift_matrix: Option<DMatrix<f64>>,
    pub sigma_tilde: DMatrix<f64>,
    pub empirical_cov: DMatrix<f64>,
    pub reference_cov: DMatrix<f64>,
    /// `‖empirical − reference‖_F / ‖reference‖_F`.
    pub rel_discrepancy: f64,
    /// Only for chain centering: one entry per occupied state.
    pub per_regime: Vec<RegimeCovariance>,
}

/// Pools the tail (final half of the post-burn-in window) of the scaled error
/// across `reps` replications and compares its covariance with the stationary
/// covariance of the matching OU limit.
pub fn diffusion_check(
    scenario: &Scenario,
    centering: Centering,
    reps: usize,
    threads: Option<usize>,
) -> Result<DiffusionReport> {
    if centering != scenario.coupling.centering() {
        return Err(Error::InvalidParameter(format!(
            "{centering:?} centering does not match {:?} coupling",
            scenario.coupling
        )));
    }
    let burn_in = scenario.burn_in();
    let r = scenario.regime.dim();
    let m0 = scenario.regime.num_states();
    let algorithm = [scenario.filter.algorithm];
    let partials = replicate(reps, threads, |i| {
        let traj = run_replication(scenario, &algorithm, i)?.remove(0);
        let series = scaled_error(&traj, &scenario.regime, centering, burn_in)?;
        let start = series.values.len() / 2;
        let mut all = Moments::new(r);
        let mut by_state = vec![Moments::new(r); m0];
        for (x, &s) in series.values[start..].iter().zip(&series.states[start..]) {
            all.push(x);
            by_state[s].push(x);
        }
        Ok((all, by_state))
    })?;
    let mut all = Moments::new(r);
    let mut by_state = vec![Moments::new(r); m0];
    for (a, bs) in &partials {
        all.merge(a);
        for (acc, b) in by_state.iter_mut().zip(bs) {
            acc.merge(b);
        }
    }
    let empirical_cov = all
        .covariance()
        .ok_or_else(|| Error::InvalidParameter("too few tail samples for a covariance".into()))?;

    let sigma_tilde = scenario.noise_covariance()?;
    let a = scenario.effective_matrix()?;
    let sys = LimitSystem::from_regime(&scenario.regime, &a, scenario.coupling.regime_kind())?;
    let (drift_matrix, reference_cov, per_regime) = match centering {
        Centering::Chain => {
            let mut weighted = DMatrix::zeros(r, r);
            let mut per_regime = Vec::new();
            for (s, moments) in by_state.iter().enumerate() {
                if moments.count == 0 {
                    continue;
                }
                let reference = lyapunov_solve(&sys.matrices()[s], &sigma_tilde)?;
                weighted += &reference * (moments.count as f64 / all.count as f64);
                per_regime.push(RegimeCovariance {
                    state: s,
                    samples: moments.count,
                    empirical_cov: moments.covariance(),
                    reference_cov: reference,
                });
            }
            (None, weighted, per_regime)
        }
        Centering::InitialMean | Centering::StationaryMean => {
            let drift = sys.averaged_matrix()?;
            let reference = lyapunov_solve(&drift, &sigma_tilde)?;
            (Some(drift), reference, Vec::new())
        }
    };
    let rel_discrepancy = (&empirical_cov - &reference_cov).norm() / reference_cov.norm();
    Ok(DiffusionReport {
        centering,
        samples: all.count,
        drift_matrix,
        sigma_tilde,
        empirical_cov,
        reference_cov,
        rel_discrepancy,
        per_regime,
    })
}

/// Steady-state MSE at one stepsize, with the bound shape evaluated there.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsePoint {
    pub mu: f64,
    pub epsilon: f64,
    pub bound: f64,
    pub steady_state_mse: f64,
    /// `steady_state_mse / bound`.
    pub ratio: f64,
}

/// Steady-state MSE over a grid of stepsizes plus the log-log slope and the
/// bound constant fitted at the first (coarsest) grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseSweep {
    pub algorithm: Algorithm,
    pub points: Vec<MsePoint>,
    pub slope: f64,
    pub fitted_c: f64,
    pub within_bound: bool,
}

/// `n_steps_for(μ)` chooses the run length at each grid point.
pub fn mse_sweep<F>(
    scenario: &Scenario,
    mus: &[f64],
    n_steps_for: F,
    threads: Option<usize>,
) -> Result<MseSweep>
where
    F: Fn(f64) -> usize,
{
    if mus.len() < 2 {
        return Err(Error::InvalidParameter("sweep needs at least two stepsizes".into()));
    }
    let algorithm = scenario.filter.algorithm;
    let mut points = Vec::with_capacity(mus.len());
    for &mu in mus {
        let mut s = scenario.with_mu(mu)?;
        s.n_steps = n_steps_for(mu);
        let curve = mse_curve(&s, &[algorithm], threads)?.remove(0);
        let steady_state_mse = curve.steady_state(s.burn_in())?;
        let bound = mse_bound(mu, s.epsilon());
        points.push(MsePoint {
            mu,
            epsilon: s.epsilon(),
            bound,
            steady_state_mse,
            ratio: steady_state_mse / bound,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.mu.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.steady_state_mse.ln()).collect();
    let slope = least_squares_slope(&xs, &ys);
    let fitted_c = points[0].ratio;
    let within_bound = points.iter().all(|p| p.steady_state_mse <= fitted_c * p.bound);
    Ok(MseSweep {
        algorithm,
        points,
        slope,
        fitted_c,
        within_bound,
    })
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Everything one command produced, keyed to its configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub mu: f64,
    pub epsilon: f64,
    pub bound: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub mse: Vec<MseCurve>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deviation: Option<PairedDeviation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<DiffusionReport>,
    /// Not serialized: output files must be reproducible byte-for-byte.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl ExperimentReport {
    pub fn new(scenario: &Scenario) -> Self {
        Self {
            config_hash: scenario.config_hash(),
            master_seed: scenario.master_seed,
            mu: scenario.mu(),
            epsilon: scenario.epsilon(),
            bound: mse_bound(scenario.mu(), scenario.epsilon()),
            mse: Vec::new(),
            deviation: None,
            diffusion: None,
            wall_clock: Duration::ZERO,
        }
    }
}
