//! Markov-chain parameter process.
//!
//! The true parameter jumps among finitely many vectors `a_i`. In discrete time
//! the chain moves with transition matrix `P = I + εQ`; its continuous-time
//! counterpart is generated by `Q` itself.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Exp1};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

const ROW_SUM_TOL: f64 = 1e-12;
const PROB_SUM_TOL: f64 = 1e-12;

/// A validated, irreducible generator of a finite continuous-time chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorMatrix {
    entries: DMatrix<f64>,
}

impl GeneratorMatrix {
    /// Checks sign pattern, zero row sums and irreducibility.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = entries.shape();
        if rows != cols || rows < 2 {
            return Err(Error::BadGeneratorShape { rows, cols });
        }
        for i in 0..rows {
            for j in 0..cols {
                let v = entries[(i, j)];
                if !v.is_finite() {
                    return Err(Error::NonFiniteEntry { row: i, col: j });
                }
                if i != j && v < 0.0 {
                    return Err(Error::NegativeOffDiagonal {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        for i in 0..rows {
            let sum: f64 = entries.row(i).iter().sum();
            if sum.abs() > ROW_SUM_TOL {
                return Err(Error::RowSumNonzero { row: i, sum });
            }
        }
        // Strongly connected iff every state is reachable from state 0 along
        // edges and along reversed edges.
        let forward = reachable(&entries, false);
        let backward = reachable(&entries, true);
        if let Some(state) = (0..rows).find(|&s| !forward[s] || !backward[s]) {
            return Err(Error::NotIrreducible { state });
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::BadGeneratorShape { rows: n, cols: m });
        }
        Self::new(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }

    pub fn num_states(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Total exit rate `-q_ii` of state `i`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.entries[(i, i)]
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.num_states())
            .map(|i| self.exit_rate(i))
            .fold(0.0, f64::max)
    }
}

fn reachable(q: &DMatrix<f64>, reversed: bool) -> Vec<bool> {
    let n = q.nrows();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            let rate = if reversed { q[(j, i)] } else { q[(i, j)] };
            if i != j && rate > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

pub(crate) fn validate_distribution(p: &DVector<f64>, len: usize) -> Result<()> {
    if p.len() != len {
        return Err(Error::DimensionMismatch {
            expected: len,
            found: p.len(),
        });
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidDistribution(format!("entry {v} is not a probability")));
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
    }
    Ok(())
}

/// State space, generator, transition scale and initial law of the parameter
/// chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeModel {
    states: Vec<DVector<f64>>,
    generator: GeneratorMatrix,
    epsilon: f64,
    initial_dist: DVector<f64>,
}

impl RegimeModel {
    pub fn new(
        states: Vec<DVector<f64>>,
        generator: GeneratorMatrix,
        epsilon: f64,
        initial_dist: DVector<f64>,
    ) -> Result<Self> {
        let m0 = generator.num_states();
        if states.len() != m0 {
            return Err(Error::InvalidRegime(format!(
                "{} states for a {m0}-state generator",
                states.len()
            )));
        }
        let r = states[0].len();
        if r == 0 {
            return Err(Error::InvalidRegime("states must have dimension >= 1".into()));
        }
        for (i, a) in states.iter().enumerate() {
            if a.len() != r {
                return Err(Error::DimensionMismatch {
                    expected: r,
                    found: a.len(),
                });
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidRegime(format!("state {i} is not finite")));
            }
            if states[..i].iter().any(|b| b == a) {
                return Err(Error::InvalidRegime(format!("state {i} duplicates an earlier state")));
            }
        }
        validate_distribution(&initial_dist, m0)?;
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidParameter(format!("epsilon must be >= 0, got {epsilon}")));
        }
        let product = epsilon * generator.max_exit_rate();
        if product > 1.0 {
            return Err(Error::InadmissibleEpsilon { epsilon, product });
        }
        Ok(Self {
            states,
            generator,
            epsilon,
            initial_dist,
        })
    }

    /// Same chain with a different transition scale.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(
            self.states.clone(),
            self.generator.clone(),
            epsilon,
            self.initial_dist.clone(),
        )
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &DVector<f64> {
        &self.states[i]
    }

    pub fn generator(&self) -> &GeneratorMatrix {
        &self.generator
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn initial_dist(&self) -> &DVector<f64> {
        &self.initial_dist
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Dimension `r` of the parameter vectors.
    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// `P = I + εQ`.
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        let m0 = self.num_states();
        DMatrix::identity(m0, m0) + self.generator.entries() * self.epsilon
    }

    /// Mean of the initial law, `α_* = Σ a_i p0_i`.
    pub fn initial_mean(&self) -> DVector<f64> {
        mean_parameter(&self.states, &self.initial_dist)
    }

    /// Mean under the stationary law, `ᾱ = Σ a_i ν_i`.
    pub fn stationary_mean(&self) -> Result<DVector<f64>> {
        Ok(mean_parameter(
            &self.states,
            &stationary_distribution(&self.generator)?,
        ))
    }
}

/// Path of the parameter chain, as state indices (0-based).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ChainPath {
    Discrete(DiscretePath),
    Continuous(ContinuousPath),
}

/// One state index per step, `n_steps + 1` entries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscretePath {
    pub indices: Vec<usize>,
}

impl DiscretePath {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Holds state `indices[k]` on `[k·step, (k+1)·step)`, over a horizon of
    /// `len · step`.
    pub fn to_continuous(&self, step: f64) -> ContinuousPath {
        let initial = self.indices.first().copied().unwrap_or(0);
        let mut jumps = Vec::new();
        let mut current = initial;
        for (k, &s) in self.indices.iter().enumerate().skip(1) {
            if s != current {
                jumps.push((k as f64 * step, s));
                current = s;
            }
        }
        ContinuousPath {
            initial,
            jumps,
            horizon: self.indices.len() as f64 * step,
        }
    }
}

/// Right-continuous piecewise-constant path on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuousPath {
    pub initial: usize,
    /// `(time, new state)`, times strictly increasing inside `(0, horizon]`.
    pub jumps: Vec<(f64, usize)>,
    pub horizon: f64,
}

impl ContinuousPath {
    pub fn constant(state: usize, horizon: f64) -> Self {
        Self {
            initial: state,
            jumps: Vec::new(),
            horizon,
        }
    }

    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jumps.partition_point(|&(s, _)| s <= t);
        if k == 0 {
            self.initial
        } else {
            self.jumps[k - 1].1
        }
    }

    pub fn jump_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.jumps.iter().map(|&(t, _)| t)
    }

    /// Time spent in each of `m0` states up to the horizon.
    pub fn occupation_times(&self, m0: usize) -> Vec<f64> {
        let mut occ = vec![0.0; m0];
        let mut t = 0.0;
        let mut s = self.initial;
        for &(tj, sj) in &self.jumps {
            occ[s] += tj - t;
            t = tj;
            s = sj;
        }
        occ[s] += self.horizon - t;
        occ
    }
}

/// Solves `νQ = 0`, `Σν = 1` via LU on the square system obtained by
/// replacing one balance equation with the normalisation.
pub fn stationary_distribution(gen: &GeneratorMatrix) -> Result<DVector<f64>> {
    let m0 = gen.num_states();
    let mut system = gen.entries().transpose();
    system.row_mut(m0 - 1).fill(1.0);
    let mut rhs = DVector::zeros(m0);
    rhs[m0 - 1] = 1.0;
    let mut nu = linalg::solve(system, &rhs)?;
    if nu.iter().any(|&v| v < -1e-12) {
        return Err(Error::SingularSystem);
    }
    nu.iter_mut().for_each(|v| *v = v.max(0.0));
    let sum = nu.sum();
    Ok(nu / sum)
}

/// Draws an index from a probability row by inversion.
pub(crate) fn draw_index<R: Rng + ?Sized>(probs: impl IntoIterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    last
}

/// Samples `α_0, ..., α_n` with `α_0 ~ p0` and transitions from rows of
/// `I + εQ`.
pub fn sample_dtmc<R: Rng + ?Sized>(model: &RegimeModel, n_steps: usize, rng: &mut R) -> DiscretePath {
    let p = model.transition_matrix();
    let mut indices = Vec::with_capacity(n_steps + 1);
    let mut s = draw_index(model.initial_dist().iter().copied(), rng);
    indices.push(s);
    for _ in 0..n_steps {
        s = draw_index(p.row(s).iter().copied(), rng);
        indices.push(s);
    }
    DiscretePath { indices }
}

/// Samples the same law as [`sample_dtmc`] through uniformization.
///
/// With `λ = max|q_ii|` the transition matrix splits as
/// `(1 - ελ) I + ελ (I + Q/λ)`, so the chain makes a move from `I + Q/λ` after
/// geometric waiting times with success probability `ελ`. Waiting times are
/// derived from unit exponentials, and one exponential plus one uniform are
/// consumed per move regardless of `ε`. Two chains built from the same stream
/// with different `ε` are therefore coupled through a common
/// continuous-time clock, which is what paired step-size comparisons need.
pub fn sample_dtmc_uniformized<R: Rng + ?Sized>(
    model: &RegimeModel,
    n_steps: usize,
    rng: &mut R,
) -> DiscretePath {
    let gen = model.generator();
    let lambda = gen.max_exit_rate();
    let m0 = model.num_states();
    let move_matrix = DMatrix::identity(m0, m0) + gen.entries() / lambda;
    let p = model.epsilon() * lambda;

    let mut s = draw_index(model.initial_dist().iter().copied(), rng);
    let mut indices = vec![s; n_steps + 1];
    if p <= 0.0 {
        return DiscretePath { indices };
    }
    let log_stay = (-p).ln_1p();
    let mut pos = 0usize;
    loop {
        let e: f64 = Exp1.sample(rng);
        let u: f64 = rng.random();
        let gap = if p >= 1.0 {
            1.0
        } else {
            (e / -log_stay).ceil().max(1.0)
        };
        if gap > (n_steps - pos) as f64 {
            break;
        }
        pos += gap as usize;
        let row = move_matrix.row(s);
        s = pick_with_uniform(row.iter().copied(), u);
        indices[pos..].fill(s);
    }
    DiscretePath { indices }
}

fn pick_with_uniform(probs: impl IntoIterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Jump-chain (Gillespie) sampling of the chain generated by `Q` on
/// `[0, horizon]`.
pub fn sample_ctmc<R: Rng + ?Sized>(
    gen: &GeneratorMatrix,
    p0: &DVector<f64>,
    horizon: f64,
    rng: &mut R,
) -> Result<ContinuousPath> {
    validate_distribution(p0, gen.num_states())?;
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
    }
    let q = gen.entries();
    let initial = draw_index(p0.iter().copied(), rng);
    let mut s = initial;
    let mut t = 0.0;
    let mut jumps = Vec::new();
    loop {
        let rate = gen.exit_rate(s);
        // irreducibility guarantees rate > 0
        let hold: f64 = Exp::new(rate).expect("positive exit rate").sample(rng);
        t += hold;
        if t > horizon {
            break;
        }
        let next = draw_index(
            (0..gen.num_states()).map(|j| if j == s { 0.0 } else { q[(s, j)] / rate }),
            rng,
        );
        jumps.push((t, next));
        s = next;
    }
    Ok(ContinuousPath {
        initial,
        jumps,
        horizon,
    })
}

/// `p(t) = p0 exp(Qt)`, integrated with RK4 on `dp/dt = pQ`.
pub fn evolve_probability(p0: &DVector<f64>, gen: &GeneratorMatrix, t: f64) -> Result<DVector<f64>> {
    validate_distribution(p0, gen.num_states())?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidParameter(format!("time must be >= 0, got {t}")));
    }
    let qt = gen.entries().transpose();
    let max_step = 1e-3 / gen.max_exit_rate();
    let n = (t / max_step).ceil() as usize;
    let mut p = p0.clone();
    if n > 0 {
        let h = t / n as f64;
        for _ in 0..n {
            let k1 = &qt * &p;
            let k2 = &qt * (&p + &k1 * (h / 2.0));
            let k3 = &qt * (&p + &k2 * (h / 2.0));
            let k4 = &qt * (&p + &k3 * h);
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
    }
    p.iter_mut().for_each(|v| *v = v.max(0.0));
    let sum = p.sum();
    Ok(p / sum)
}

/// Law of `α_n`: `p₀ (P^ε)^n`.
pub fn marginal_distribution(model: &RegimeModel, n: usize) -> DVector<f64> {
    let pt = model.transition_matrix().transpose();
    let mut p = model.initial_dist().clone();
    for _ in 0..n {
        p = &pt * p;
    }
    p
}

/// `Σ_i dist_i a_i`.
pub fn mean_parameter(states: &[DVector<f64>], dist: &DVector<f64>) -> DVector<f64> {
    assert_eq!(states.len(), dist.len(), "one probability per state");
    let r = states.first().map_or(0, |a| a.len());
    states
        .iter()
        .zip(dist.iter())
        .fold(DVector::zeros(r), |acc, (a, &p)| acc + a * p)
}
