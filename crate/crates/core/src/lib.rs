//! Sign-error adaptive filtering for parameters that jump according to a
//! finite-state Markov chain.
//!
//! The crate is organised bottom-up:
//!
//! - [`regime`]: generator matrices, the scaled transition matrix `I + εQ`,
//!   discrete and continuous chain sampling, probability flows.
//! - [`signal`]: i.i.d. regressor/noise models and the observation equation.
//! - [`filter`]: sign-error, sign-regressor and LMS recursions plus the
//!   replication driver.
//! - [`limits`]: effective matrices, the switched/slow/fast limit ODEs, noise
//!   covariance, Lyapunov solves and Ornstein-Uhlenbeck simulation.
//! - [`experiment`]: Monte Carlo harness (MSE curves, ODE deviation, scaled
//!   error statistics).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod filter;
pub mod limits;
pub mod linalg;
pub mod regime;
pub mod rng;
pub mod signal;

pub use error::{Error, Result};
pub use experiment::{Centering, Coupling, ExperimentReport, Scenario};
pub use filter::{Algorithm, FilterConfig, Trajectory};
pub use limits::{LimitSystem, NoiseCovariance, RegimeKind};
pub use regime::{ChainPath, GeneratorMatrix, RegimeModel};
pub use signal::{NoiseDist, RegressorDist, SignalModel};

pub use nalgebra::{DMatrix, DVector};
