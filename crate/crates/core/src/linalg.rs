//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `m x = b` by LU with partial pivoting.
pub fn solve(m: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let x = m.lu().solve(b).ok_or(Error::SingularSystem)?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularSystem)
    }
}

/// True when every eigenvalue of `a` has strictly positive real part, i.e. the
/// flow `x' = -a x` is contracting.
pub fn is_positive_stable(a: &DMatrix<f64>) -> bool {
    a.complex_eigenvalues().iter().all(|ev| ev.re > 0.0)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Sample covariance (divisor `n - 1`) of a set of equal-length vectors.
pub fn sample_covariance(samples: &[DVector<f64>]) -> Option<DMatrix<f64>> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let r = samples[0].len();
    let mut mean = DVector::zeros(r);
    for s in samples {
        mean += s;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(r, r);
    for s in samples {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    Some(cov / (n as f64 - 1.0))
}
