use nalgebra::{Cholesky, Dyn};

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

pub fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Largest absolute entry (the infinity norm).
pub fn max_abs(v: &Vector) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Arithmetic mean of equally sized vectors, summed in iteration order.
pub fn mean_of<'a, I>(dim: usize, vectors: I) -> Vector
where
    I: IntoIterator<Item = &'a Vector>,
{
    let mut acc = Vector::zeros(dim);
    let mut n = 0usize;
    for v in vectors {
        acc += v;
        n += 1;
    }
    if n > 0 {
        acc /= n as f64;
    }
    acc
}

pub fn cholesky(m: Matrix, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or(Error::NotPositiveDefinite(what))
}

/// (smallest, largest) eigenvalue of a symmetric matrix.
pub fn sym_eigen_range(m: &Matrix) -> (f64, f64) {
    let eig = m.clone().symmetric_eigenvalues();
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn symmetric_spectral_norm(m: &Matrix) -> f64 {
    let (lo, hi) = sym_eigen_range(m);
    lo.abs().max(hi.abs())
}
