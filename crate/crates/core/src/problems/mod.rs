//! Bilevel oracles and the verification-capable problem families.
//!
//! A problem is shared by every device: homogeneity is obtained by construction
//! and devices differ only in the [`RandomStream`] they draw samples from.

mod quadquad;
mod ridge;

pub use quadquad::{QuadQuad, QuadQuadParams};
pub use ridge::{RidgeData, RidgeHyper};

use crate::error::{check_dim, Error, Result};
use crate::numerics::RandomStream;
use crate::Vector;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
}

/// Arguments of one stochastic oracle call. `sample` is the stream snapshot
/// the oracle reads its randomness from; reusing it replays the sample.
#[derive(Clone, Copy, Debug)]
pub struct OracleQuery<'a> {
    pub x: &'a Vector,
    pub y: &'a Vector,
    pub sample: RandomStream,
}

impl<'a> OracleQuery<'a> {
    pub fn new(x: &'a Vector, y: &'a Vector, sample: RandomStream) -> Self {
        Self { x, y, sample }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        check_dim("x", dims.x, self.x.len())?;
        check_dim("y", dims.y, self.y.len())
    }
}

/// Constants of the standing assumptions, declared over the problem's region
/// `|x|, |y| <= radius`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothnessConstants {
    /// Strong convexity of every lower-level sample in `y`.
    pub mu: f64,
    /// Lipschitz constant of the upper-level samples.
    pub l0: f64,
    /// Lipschitz constant of the gradients of both levels.
    pub l1: f64,
    /// Lipschitz constant of the mixed second derivative of `g`.
    pub l21: f64,
    /// Lipschitz constant of the `yy` Hessian of `g`.
    pub l22: f64,
    /// Bound on the standard deviation of `grad g` samples.
    pub sigma: f64,
}

impl SmoothnessConstants {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu, self.l0, self.l1, self.l21, self.l22, self.sigma]
            .iter()
            .all(|c| c.is_finite());
        if !finite {
            return Err(Error::invalid("smoothness", "constants must be finite"));
        }
        if !(self.mu > 0.0) || !(self.l0 > 0.0) {
            return Err(Error::invalid("smoothness", "mu and L0 must be positive"));
        }
        if self.l1 < self.mu {
            return Err(Error::invalid("smoothness", "L1 must be at least mu"));
        }
        if self.l21 < 0.0 || self.l22 < 0.0 || self.sigma < 0.0 {
            return Err(Error::invalid("smoothness", "L21, L22 and sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Stochastic first- and second-order information of a bilevel problem
/// `min_x f(x, y*(x))`, `y*(x) = argmin_y g(x, y)`.
///
/// Every stochastic method reads exactly one sample from `q.sample`; a sample
/// spans [`BilevelOracle::sample_width`] stream slots. Calls with the same
/// sample are deterministic.
pub trait BilevelOracle: Sync {
    fn dims(&self) -> Dims;

    /// Per-coordinate noise level of the lower-level gradient samples.
    fn noise_std(&self) -> f64;

    /// Stream slots consumed by one sample.
    fn sample_width(&self) -> u64;

    fn smoothness(&self) -> SmoothnessConstants;

    /// Radius of the region the smoothness constants are declared over.
    fn region_radius(&self) -> f64;

    fn grad_x_f(&self, q: &OracleQuery<'_>) -> Result<Vector>;
    fn grad_y_f(&self, q: &OracleQuery<'_>) -> Result<Vector>;
    fn grad_y_g(&self, q: &OracleQuery<'_>) -> Result<Vector>;
    /// One sample of `grad_yy g(x, y) v`.
    fn hvp_yy_g(&self, q: &OracleQuery<'_>, v: &Vector) -> Result<Vector>;
    /// One sample of `grad_xy g(x, y) v` (maps y-space to x-space).
    fn jvp_xy_g(&self, q: &OracleQuery<'_>, v: &Vector) -> Result<Vector>;

    /// Deterministic upper-level objective `f(x, y)`.
    fn upper_objective(&self, x: &Vector, y: &Vector) -> Result<f64>;

    fn has_exact_lower_solution(&self) -> bool {
        false
    }

    fn has_exact_hypergradient(&self) -> bool {
        false
    }

    fn exact_lower_solution(&self, _x: &Vector) -> Result<Vector> {
        Err(Error::Unsupported("exact lower-level solution"))
    }

    fn exact_hypergradient(&self, _x: &Vector) -> Result<Vector> {
        Err(Error::Unsupported("exact hypergradient"))
    }

    /// `Phi(x) = f(x, y*(x))`.
    fn hyper_objective(&self, x: &Vector) -> Result<f64> {
        let y = self.exact_lower_solution(x)?;
        self.upper_objective(x, &y)
    }
}

impl<O: BilevelOracle + ?Sized> BilevelOracle for &O {
    fn dims(&self) -> Dims {
        (**self).dims()
    }
    fn noise_std(&self) -> f64 {
        (**self).noise_std()
    }
    fn sample_width(&self) -> u64 {
        (**self).sample_width()
    }
    fn smoothness(&self) -> SmoothnessConstants {
        (**self).smoothness()
    }
    fn region_radius(&self) -> f64 {
        (**self).region_radius()
    }
    fn grad_x_f(&self, q: &OracleQuery<'_>) -> Result<Vector> {
        (**self).grad_x_f(q)
    }
    fn grad_y_f(&self, q: &OracleQuery<'_>) -> Result<Vector> {
        (**self).grad_y_f(q)
    }
    fn grad_y_g(&self, q: &OracleQuery<'_>) -> Result<Vector> {
        (**self).grad_y_g(q)
    }
    fn hvp_yy_g(&self, q: &OracleQuery<'_>, v: &Vector) -> Result<Vector> {
        (**self).hvp_yy_g(q, v)
    }
    fn jvp_xy_g(&self, q: &OracleQuery<'_>, v: &Vector) -> Result<Vector> {
        (**self).jvp_xy_g(q, v)
    }
    fn upper_objective(&self, x: &Vector, y: &Vector) -> Result<f64> {
        (**self).upper_objective(x, y)
    }
    fn has_exact_lower_solution(&self) -> bool {
        (**self).has_exact_lower_solution()
    }
    fn has_exact_hypergradient(&self) -> bool {
        (**self).has_exact_hypergradient()
    }
    fn exact_lower_solution(&self, x: &Vector) -> Result<Vector> {
        (**self).exact_lower_solution(x)
    }
    fn exact_hypergradient(&self, x: &Vector) -> Result<Vector> {
        (**self).exact_hypergradient(x)
    }
    fn hyper_objective(&self, x: &Vector) -> Result<f64> {
        (**self).hyper_objective(x)
    }
}
