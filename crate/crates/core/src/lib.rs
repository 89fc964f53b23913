//! Federated stochastic bilevel optimization.
//!
//! The crate is `no_std` (it needs `alloc`) and contains the whole algorithmic
//! stack of the simulator:
//!
//! * [`numerics`]: counter-based random streams, dense helpers and
//!   finite-difference gradients.
//! * [`problems`]: the [`problems::BilevelOracle`] interface plus two problem
//!   families with closed-form lower-level solutions and hypergradients.
//! * [`hypergrad`]: the truncated Neumann-series inverse-Hessian product, the
//!   stochastic hypergradient estimator and the composite smoothness constants.
//! * [`algorithms`]: the moving-average (LocalBSGM) and STORM (LocalBSGVRM)
//!   estimators, local updates, step schedules and theorem-driven
//!   hyperparameters.
//! * [`federation`]: a deterministic K-device simulator with periodic
//!   averaging, sample/communication accounting and the convergence metric.
//!
//! IO, configuration files and the command line live in the `fedbilevel` crate.
#![no_std]
#![forbid(unsafe_code)]
// `!(v > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod algorithms;
pub mod error;
pub mod federation;
pub mod hypergrad;
pub mod numerics;
pub mod problems;

pub use error::{Error, Result};

/// Dense real vector used for every iterate, momentum and gradient.
pub type Vector = nalgebra::DVector<f64>;
/// Dense real matrix.
pub type Matrix = nalgebra::DMatrix<f64>;
