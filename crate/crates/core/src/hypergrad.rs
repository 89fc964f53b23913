//! Truncated Neumann-series hypergradients and the composite constants that
//! govern their bias and smoothness.
//!
//! The inverse lower-level Hessian is approximated by
//! `theta * sum_{q=-1}^{Q-1} prod_{j=Q-q}^{Q} (I - theta H_j)` with independent
//! Hessian samples `H_j`; the `q = -1` term is the empty product (identity).
//! It is only ever applied to a vector, through Hessian-vector products.

use crate::error::{check_dim, Error, Result};
use crate::numerics::RandomStream;
use crate::problems::{BilevelOracle, OracleQuery, SmoothnessConstants};
use crate::Vector;

/// Step `theta` and number of Hessian samples `Q` of the Neumann series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeumannConfig {
    theta: f64,
    terms: usize,
}

impl NeumannConfig {
    /// Only checks `theta > 0`; use [`NeumannConfig::check_against`] to
    /// enforce `theta * L1 < 1` for a given problem.
    pub fn new(theta: f64, terms: usize) -> Result<Self> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::invalid("theta", "must be positive and finite"));
        }
        Ok(Self { theta, terms })
    }

    /// `theta = 0.9 / L1` and the smallest `Q` with `Delta_Q <= epsilon / 10`.
    pub fn for_target(sc: &SmoothnessConstants, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        let theta = 0.9 / sc.l1;
        let contraction = 1.0 - theta * sc.mu;
        let scale = sc.l0 * sc.l1 / sc.mu;
        let target = epsilon / 10.0;
        let terms = if scale <= target || contraction <= 0.0 {
            0
        } else {
            // smallest Q with contraction^(Q+1) * scale <= target
            let needed = libm::log(target / scale) / libm::log(contraction);
            let mut q = libm::ceil(needed - 1.0).max(0.0) as usize;
            while libm::pow(contraction, (q + 1) as f64) * scale > target {
                q += 1;
            }
            q
        };
        Self::new(theta, terms)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Number of Hessian samples `Q`.
    pub fn terms(&self) -> usize {
        self.terms
    }

    pub fn check_against(&self, sc: &SmoothnessConstants) -> Result<()> {
        let t = self.theta * sc.l1;
        if t > 0.0 && t < 1.0 {
            Ok(())
        } else {
            Err(Error::invalid("theta", "need 0 < theta * L1 < 1"))
        }
    }

    /// Oracle samples consumed by one stochastic hypergradient: one upper
    /// sample, one sample for the mixed derivative and `Q` Hessian samples.
    pub fn samples_per_hypergradient(&self) -> usize {
        self.terms + 2
    }
}

/// Applies the sampled Neumann approximation of the inverse `yy` Hessian to
/// `w`, drawing `Q` Hessian samples from `stream`.
pub fn neumann_apply<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    w: &Vector,
    cfg: &NeumannConfig,
    stream: &mut RandomStream,
) -> Result<Vector> {
    check_dim("Neumann input", oracle.dims().y, w.len())?;
    let width = oracle.sample_width();
    let mut term = w.clone();
    let mut acc = w.clone();
    for _ in (1..=cfg.terms).rev() {
        let q = OracleQuery::new(x, y, stream.take(width));
        let hv = oracle.hvp_yy_g(&q, &term)?;
        term.axpy(-cfg.theta, &hv, 1.0);
        acc += &term;
    }
    Ok(acc * cfg.theta)
}

/// The randomness of one stochastic hypergradient: the upper sample `xi`, the
/// sample for the mixed derivative and the `Q` Hessian samples, laid out in
/// that order from a single stream snapshot. Evaluating the same sample at
/// two points reuses every draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HypergradSample {
    base: RandomStream,
    width: u64,
}

impl HypergradSample {
    pub fn draw<O: BilevelOracle + ?Sized>(oracle: &O, cfg: &NeumannConfig, stream: &mut RandomStream) -> Self {
        let width = oracle.sample_width();
        let base = stream.take(width * cfg.samples_per_hypergradient() as u64);
        Self { base, width }
    }

    pub fn evaluate<O: BilevelOracle + ?Sized>(
        &self,
        oracle: &O,
        x: &Vector,
        y: &Vector,
        cfg: &NeumannConfig,
    ) -> Result<Vector> {
        let upper = OracleQuery::new(x, y, self.base);
        let grad_x = oracle.grad_x_f(&upper)?;
        let grad_y = oracle.grad_y_f(&upper)?;
        let mut hessian_stream = self.base.advanced(2 * self.width);
        let h_grad_y = neumann_apply(oracle, x, y, &grad_y, cfg, &mut hessian_stream)?;
        let mixed = OracleQuery::new(x, y, self.base.advanced(self.width));
        Ok(grad_x - oracle.jvp_xy_g(&mixed, &h_grad_y)?)
    }
}

/// One draw of `grad_x f(x,y;xi) - grad_xy g(x,y;z) H_hat grad_y f(x,y;xi)`.
pub fn stochastic_hypergradient<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    cfg: &NeumannConfig,
    stream: &mut RandomStream,
) -> Result<Vector> {
    HypergradSample::draw(oracle, cfg, stream).evaluate(oracle, x, y, cfg)
}

/// Composite constants derived from the smoothness assumptions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivedConstants {
    /// Smoothness of `Phi`.
    pub l_phi: f64,
    /// Smoothness of the approximate hypergradient.
    pub l_hat: f64,
    /// Weight of the lower-level gap in the convergence metric.
    pub l_tilde: f64,
    /// Second-moment bound of the stochastic hypergradient.
    pub g: f64,
    /// Bias bound of the Neumann approximation.
    pub delta_q: f64,
}

/// `L12` does not appear among the assumptions; it is taken equal to `L21`.
pub fn derived_constants(sc: &SmoothnessConstants, cfg: &NeumannConfig) -> DerivedConstants {
    let SmoothnessConstants {
        mu,
        l0,
        l1,
        l21,
        l22,
        sigma,
    } = *sc;
    let l12 = l21;
    let theta = cfg.theta;
    let q = cfg.terms as f64;
    let q1 = q + 1.0;
    let th2 = theta * theta;
    let th4 = th2 * th2;
    let (l0_2, l1_2) = (l0 * l0, l1 * l1);

    let l_phi = l1
        + (2.0 * l1_2 + l21 * l0_2) / mu
        + (l22 * l1 * l0 + l1_2 * l1 + l12 * l0 * l1) / (mu * mu)
        + l22 * l1_2 * l0 / (mu * mu * mu);
    let l_hat_sq = 2.0 * l1_2
        + 4.0 * th2 * l0_2 * l21 * l21 * q1 * q1
        + 8.0 * th2 * l1_2 * l1_2 * q1 * q1
        + 2.0 * th4 * l0_2 * l1_2 * l22 * l22 * q * q * q1 * q1;
    let l_tilde = l1 + l1_2 / mu + l0 * l21 / mu + l0 * l1 * l22 / (mu * mu);
    let g = 2.0 * l0_2
        + 12.0 * th2 * l0_2 * l1_2 * q1 * q1
        + 4.0 * th4 * l0_2 * l1_2 * (q + 2.0) * q1 * q1 * sigma * sigma;
    let delta_q = libm::pow(1.0 - theta * mu, q1) * l0 * l1 / mu;
    DerivedConstants {
        l_phi,
        l_hat: libm::sqrt(l_hat_sq),
        l_tilde,
        g,
        delta_q,
    }
}

/// `| mean of n stochastic hypergradients at (x, y*(x)) - grad Phi(x) |`.
pub fn measure_bias<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    cfg: &NeumannConfig,
    n_draws: usize,
    stream: &mut RandomStream,
) -> Result<f64> {
    if n_draws == 0 {
        return Err(Error::invalid("n_draws", "must be positive"));
    }
    let exact = oracle.exact_hypergradient(x)?;
    let y = oracle.exact_lower_solution(x)?;
    let mut acc = Vector::zeros(exact.len());
    for _ in 0..n_draws {
        acc += stochastic_hypergradient(oracle, x, &y, cfg, stream)?;
    }
    acc /= n_draws as f64;
    Ok((acc - exact).norm())
}
