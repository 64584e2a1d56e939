use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("generator must be square with at least 2 states, got {rows}x{cols}")]
    BadGeneratorShape { rows: usize, cols: usize },
    #[error("negative off-diagonal generator entry q[{row}][{col}] = {value}")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("generator row {row} sums to {sum}, expected 0")]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("generator is not irreducible: state {state} cannot reach every other state")]
    NotIrreducible { state: usize },
    #[error("non-finite generator entry at ({row}, {col})")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("invalid regime model: {0}")]
    InvalidRegime(String),
    #[error("epsilon {epsilon} is not admissible: epsilon * max|q_ii| = {product} > 1")]
    InadmissibleEpsilon { epsilon: f64, product: f64 },
    #[error("singular linear system")]
    SingularSystem,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid signal model: {0}")]
    InvalidSignal(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("estimate diverged at step {step}: |theta| = {norm}")]
    DivergenceDetected { step: usize, norm: f64 },
    #[error("replication {index}: {source}")]
    Replication {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("closed-form effective matrix requires Gaussian regressors and noise")]
    NonGaussianClosedForm,
    #[error("Monte Carlo standard error {std_err} exceeds 5% of matrix norm {norm}")]
    MonteCarloVarianceTooHigh { std_err: f64, norm: f64 },
    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue})")]
    NotPositiveSemidefinite { eigenvalue: f64 },
    #[error("Lyapunov equation is singular or A is not stable")]
    SingularLyapunov,
    #[error("matrix for state {state} is not stable")]
    NotStable { state: usize },
    #[error("unknown state index {0}")]
    UnknownState(usize),
    #[error("time {t} is outside the horizon [0, {horizon})")]
    OutOfHorizon { t: f64, horizon: f64 },
}

impl Error {
    /// Tags an error with the replication that produced it.
    pub fn in_replication(self, index: usize) -> Self {
        match self {
            Error::Replication { .. } => self,
            other => Error::Replication {
                index,
                source: Box::new(other),
            },
        }
    }

    /// True if this error (or its wrapped cause) is a numerical divergence.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::DivergenceDetected { .. } => true,
            Error::Replication { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
