//! Exogenous regressors and observation noise.
//!
//! Draws are i.i.d. across time and independent of the parameter chain, so the
//! mixing condition on the effective matrices holds trivially.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressorDist {
    Gaussian { cov: DMatrix<f64> },
    /// Gaussian conditioned on every component lying in `[-clip, clip]`.
    TruncatedGaussian { cov: DMatrix<f64>, clip: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseDist {
    Gaussian { variance: f64 },
    TruncatedGaussian { variance: f64, clip: f64 },
}

impl RegressorDist {
    pub fn cov(&self) -> &DMatrix<f64> {
        match self {
            RegressorDist::Gaussian { cov } | RegressorDist::TruncatedGaussian { cov, .. } => cov,
        }
    }

    fn clip(&self) -> Option<f64> {
        match self {
            RegressorDist::Gaussian { .. } => None,
            RegressorDist::TruncatedGaussian { clip, .. } => Some(*clip),
        }
    }
}

impl NoiseDist {
    pub fn variance(&self) -> f64 {
        match self {
            NoiseDist::Gaussian { variance } | NoiseDist::TruncatedGaussian { variance, .. } => *variance,
        }
    }

    fn clip(&self) -> Option<f64> {
        match self {
            NoiseDist::Gaussian { .. } => None,
            NoiseDist::TruncatedGaussian { clip, .. } => Some(*clip),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalModel {
    regressor: RegressorDist,
    noise: NoiseDist,
    #[serde(skip)]
    chol: DMatrix<f64>,
    #[serde(skip)]
    noise_std: f64,
}

impl SignalModel {
    pub fn new(regressor: RegressorDist, noise: NoiseDist) -> Result<Self> {
        let cov = regressor.cov();
        let r = cov.nrows();
        if r == 0 || cov.ncols() != r {
            return Err(Error::InvalidSignal(format!(
                "regressor covariance must be square and non-empty, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let scale = crate::linalg::max_abs(cov).max(1.0);
        if (cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidSignal("regressor covariance is not symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidSignal("regressor covariance is not positive definite".into()))?
            .l();
        let variance = noise.variance();
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::InvalidSignal(format!("noise variance must be positive, got {variance}")));
        }
        for clip in [regressor.clip(), noise.clip()].into_iter().flatten() {
            if !(clip > 0.0) || !clip.is_finite() {
                return Err(Error::InvalidSignal(format!("truncation bound must be positive, got {clip}")));
            }
        }
        Ok(Self {
            regressor,
            noise,
            chol,
            noise_std: variance.sqrt(),
        })
    }

    /// `N(0, Σ_φ)` regressors with `N(0, σ_e²)` noise.
    pub fn gaussian(cov: DMatrix<f64>, noise_variance: f64) -> Result<Self> {
        Self::new(
            RegressorDist::Gaussian { cov },
            NoiseDist::Gaussian {
                variance: noise_variance,
            },
        )
    }

    pub fn regressor(&self) -> &RegressorDist {
        &self.regressor
    }

    pub fn noise(&self) -> &NoiseDist {
        &self.noise
    }

    pub fn dim(&self) -> usize {
        self.chol.nrows()
    }

    pub fn regressor_cov(&self) -> &DMatrix<f64> {
        self.regressor.cov()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.regressor, RegressorDist::Gaussian { .. }) && matches!(self.noise, NoiseDist::Gaussian { .. })
    }

    /// Writes a regressor draw into `phi` and returns the matching noise draw.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, phi: &mut DVector<f64>) -> f64 {
        let r = self.dim();
        debug_assert_eq!(phi.len(), r);
        let mut z = DVector::<f64>::zeros(r);
        loop {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            phi.gemv(1.0, &self.chol, &z, 0.0);
            match self.regressor.clip() {
                Some(b) if phi.iter().any(|v| v.abs() > b) => continue,
                _ => break,
            }
        }
        loop {
            let e = self.noise_std * rng.sample::<f64, _>(StandardNormal);
            match self.noise.clip() {
                Some(b) if e.abs() > b => continue,
                _ => return e,
            }
        }
    }

    pub fn sample_signal<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, f64) {
        let mut phi = DVector::zeros(self.dim());
        let e = self.sample_into(rng, &mut phi);
        (phi, e)
    }
}

/// `y = φᵀa + e`.
pub fn observe(phi: &DVector<f64>, a: &DVector<f64>, e: f64) -> Result<f64> {
    if phi.len() != a.len() {
        return Err(Error::DimensionMismatch {
            expected: phi.len(),
            found: a.len(),
        });
    }
    Ok(phi.dot(a) + e)
}
