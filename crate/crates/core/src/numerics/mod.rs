//! Randomness, dense kernels and finite-difference oracles.

mod dense;
mod finite_diff;
mod stream;

pub use dense::{all_finite, cholesky, max_abs, mean_of, sym_eigen_range, symmetric_spectral_norm};
pub use finite_diff::{default_step, finite_diff_grad};
pub use stream::RandomStream;
