//! Local gradient estimators, local updates, step schedules and the
//! hyperparameters prescribed by the convergence theorems.
//!
//! Both algorithms keep a hypergradient estimate `u` and a lower-level
//! gradient estimate `v` per device:
//!
//! * LocalBSGM uses moving averages
//!   `u_t = (1 - alpha eta) u_{t-1} + alpha eta grad_hat(x_t, y_t)`.
//! * LocalBSGVRM uses STORM corrections
//!   `u_t = (1 - alpha eta_{t-1}^2)(u_{t-1} - grad_hat(x_{t-1}, y_{t-1})) + grad_hat(x_t, y_t)`
//!   where both evaluations share one sample.
//!
//! The iterates then move by `x -= rho1 eta u`, `y -= rho2 eta v`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hypergrad::{DerivedConstants, HypergradSample, NeumannConfig};
use crate::numerics::RandomStream;
use crate::problems::{BilevelOracle, OracleQuery, SmoothnessConstants};
use crate::Vector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    LocalBsgm,
    LocalBsgvrm,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::LocalBsgm => "LocalBSGM",
            Algorithm::LocalBsgvrm => "LocalBSGVRM",
        }
    }

    /// Oracle evaluations one device spends in iteration `t`.
    ///
    /// A stochastic hypergradient costs `Q + 2` evaluations and the
    /// lower-level gradient one more. The STORM step evaluates both at two
    /// points; its first iteration averages a batch of `batch` draws.
    pub fn samples_at(&self, t: usize, neumann: &NeumannConfig, batch: usize) -> u64 {
        let per_draw = neumann.samples_per_hypergradient() as u64 + 1;
        match (self, t) {
            (Algorithm::LocalBsgm, _) => per_draw,
            (Algorithm::LocalBsgvrm, 0) => per_draw * batch as u64,
            (Algorithm::LocalBsgvrm, _) => 2 * per_draw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub rho1: f64,
    pub rho2: f64,
    /// Batch size of the first LocalBSGVRM iteration.
    pub batch: usize,
    pub neumann: NeumannConfig,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.alpha) {
            return Err(Error::invalid("alpha", "must be positive"));
        }
        if !positive(self.beta) {
            return Err(Error::invalid("beta", "must be positive"));
        }
        if !positive(self.rho1) {
            return Err(Error::invalid("rho1", "must be positive"));
        }
        if !positive(self.rho2) {
            return Err(Error::invalid("rho2", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be at least 1"));
        }
        Ok(())
    }
}

/// Step size `eta_t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    Fixed {
        eta: f64,
    },
    /// `eta_t = (K^{2/3} / L_hat) / (w_t + t)^{1/3}` with
    /// `w_t = max{2, 200^3 K^2 p^3 - t, 8 rho1^3 L_Phi^3 K^2 / L_hat^3 - t}`.
    Decaying {
        devices: usize,
        period: usize,
        l_hat: f64,
        rho1: f64,
        l_phi: f64,
    },
}

impl StepSchedule {
    pub fn eta(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Fixed { eta } => eta,
            StepSchedule::Decaying {
                devices,
                period,
                l_hat,
                rho1,
                l_phi,
            } => {
                let k = devices as f64;
                let p = period as f64;
                let t = t as f64;
                let warm = 200.0f64.powi(3) * k * k * p * p * p;
                let ratio = rho1 * l_phi / l_hat;
                let smooth = 8.0 * ratio * ratio * ratio * k * k;
                // written as w_t + t to avoid cancellation in w_t
                let shifted = (2.0 + t).max(warm).max(smooth);
                libm::cbrt(k * k) / l_hat / libm::cbrt(shifted)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Fixed { eta } if eta > 0.0 && eta.is_finite() => Ok(()),
            StepSchedule::Fixed { .. } => Err(Error::invalid("eta", "must be positive")),
            StepSchedule::Decaying {
                devices,
                period,
                l_hat,
                rho1,
                l_phi,
            } => {
                if devices == 0 || period == 0 {
                    return Err(Error::invalid("schedule", "devices and period must be positive"));
                }
                if !(l_hat > 0.0) || !(rho1 > 0.0) || !(l_phi > 0.0) {
                    return Err(Error::invalid("schedule", "L_hat, rho1 and L_Phi must be positive"));
                }
                Ok(())
            }
        }
    }
}

/// Per-device momenta. `prev` holds the iterate of the previous estimator
/// step and is present only for the STORM estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    pub u: Vector,
    pub v: Vector,
    pub prev: Option<(Vector, Vector)>,
}

fn lower_gradient<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    sample: RandomStream,
) -> Result<Vector> {
    oracle.grad_y_g(&OracleQuery::new(x, y, sample))
}

/// First LocalBSGM iteration: one raw draw of each gradient.
pub fn bsgm_init<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    hp: &HyperParams,
    stream: &mut RandomStream,
) -> Result<EstimatorState> {
    let sample = HypergradSample::draw(oracle, &hp.neumann, stream);
    let lower = stream.take(oracle.sample_width());
    Ok(EstimatorState {
        u: sample.evaluate(oracle, x, y, &hp.neumann)?,
        v: lower_gradient(oracle, x, y, lower)?,
        prev: None,
    })
}

/// First LocalBSGVRM iteration: mean of `hp.batch` draws of each gradient.
pub fn bsgvrm_init<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    hp: &HyperParams,
    stream: &mut RandomStream,
) -> Result<EstimatorState> {
    let dims = oracle.dims();
    let mut u = Vector::zeros(dims.x);
    let mut v = Vector::zeros(dims.y);
    for _ in 0..hp.batch {
        let sample = HypergradSample::draw(oracle, &hp.neumann, stream);
        let lower = stream.take(oracle.sample_width());
        u += sample.evaluate(oracle, x, y, &hp.neumann)?;
        v += lower_gradient(oracle, x, y, lower)?;
    }
    let n = hp.batch as f64;
    Ok(EstimatorState {
        u: u / n,
        v: v / n,
        prev: Some((x.clone(), y.clone())),
    })
}

fn mixing_weight(name: &'static str, w: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&w) {
        Ok(w)
    } else {
        Err(Error::StepConstraint { constraint: name, value: w })
    }
}

/// Moving-average update of `u` and `v` with fresh single-sample draws.
/// Requires `alpha eta <= 1` and `beta eta <= 1`.
pub fn bsgm_estimator_step<O: BilevelOracle + ?Sized>(
    state: &EstimatorState,
    x: &Vector,
    y: &Vector,
    eta: f64,
    hp: &HyperParams,
    oracle: &O,
    stream: &mut RandomStream,
) -> Result<EstimatorState> {
    let a = mixing_weight("alpha * eta <= 1", hp.alpha * eta)?;
    let b = mixing_weight("beta * eta <= 1", hp.beta * eta)?;
    let sample = HypergradSample::draw(oracle, &hp.neumann, stream);
    let lower = stream.take(oracle.sample_width());
    let fresh_u = sample.evaluate(oracle, x, y, &hp.neumann)?;
    let fresh_v = lower_gradient(oracle, x, y, lower)?;
    Ok(EstimatorState {
        u: &state.u * (1.0 - a) + fresh_u * a,
        v: &state.v * (1.0 - b) + fresh_v * b,
        prev: None,
    })
}

/// STORM update of `u` and `v`. The correction terms at the previous iterate
/// and the new terms at `(x, y)` are evaluated on the same sample.
/// Requires `alpha eta_prev^2 <= 1` and `beta eta_prev^2 <= 1`.
pub fn bsgvrm_estimator_step<O: BilevelOracle + ?Sized>(
    state: &EstimatorState,
    x: &Vector,
    y: &Vector,
    eta_prev: f64,
    hp: &HyperParams,
    oracle: &O,
    stream: &mut RandomStream,
) -> Result<EstimatorState> {
    let (px, py) = state.prev.as_ref().ok_or(Error::MissingPreviousIterate)?;
    let a = mixing_weight("alpha * eta^2 <= 1", hp.alpha * eta_prev * eta_prev)?;
    let b = mixing_weight("beta * eta^2 <= 1", hp.beta * eta_prev * eta_prev)?;
    let sample = HypergradSample::draw(oracle, &hp.neumann, stream);
    let lower = stream.take(oracle.sample_width());

    let u_old = sample.evaluate(oracle, px, py, &hp.neumann)?;
    let u_new = sample.evaluate(oracle, x, y, &hp.neumann)?;
    let v_old = lower_gradient(oracle, px, py, lower)?;
    let v_new = lower_gradient(oracle, x, y, lower)?;
    Ok(EstimatorState {
        u: (&state.u - u_old) * (1.0 - a) + u_new,
        v: (&state.v - v_old) * (1.0 - b) + v_new,
        prev: Some((x.clone(), y.clone())),
    })
}

/// Two-timescale descent step `(x - rho1 eta u, y - rho2 eta v)`.
pub fn local_update(
    x: &Vector,
    y: &Vector,
    state: &EstimatorState,
    eta: f64,
    hp: &HyperParams,
) -> (Vector, Vector) {
    (x - &state.u * (hp.rho1 * eta), y - &state.v * (hp.rho2 * eta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TheoremVariant {
    /// LocalBSGM with a fixed step.
    BsgmFixed,
    /// LocalBSGVRM with a fixed step.
    BsgvrmFixed,
    /// LocalBSGVRM with the decaying step.
    BsgvrmDecaying,
}

impl TheoremVariant {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            TheoremVariant::BsgmFixed => Algorithm::LocalBsgm,
            _ => Algorithm::LocalBsgvrm,
        }
    }
}

/// Backoff applied to strict upper bounds (`eta < cap` becomes `0.99 cap`).
pub const STRICT_BACKOFF: f64 = 0.99;

fn min_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

struct Caps {
    rho1: Vec<f64>,
    rho2: Vec<f64>,
    eta: Vec<f64>,
}

fn thm1_rho(c: &DerivedConstants, sc: &SmoothnessConstants, alpha: f64, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let (mu, l1, lt, lh) = (sc.mu, sc.l1, c.l_tilde, c.l_hat);
    let rho2 = alloc::vec![
        (6.0 * lt * lt / mu)
            / (4.0 * lh * lh / (alpha * alpha) + 400.0 * l1 * l1 * lt * lt / (3.0 * beta * beta * mu * mu)),
        1.0 / (6.0 * l1),
    ];
    let rho2_v = min_of(&rho2);
    let rho1 = alloc::vec![
        3.0 * rho2_v * mu * mu / (50.0 * l1 * lt),
        0.25 / libm::sqrt(
            4.0 * lh * lh / (alpha * alpha) + 500.0 * l1 * l1 * lt * lt / (3.0 * beta * beta * mu * mu)
        ),
    ];
    (rho1, rho2)
}

fn thm1_eta(c: &DerivedConstants, p: usize, alpha: f64, beta: f64, rho1: f64, rho2: f64) -> Vec<f64> {
    let denom = 3.0
        * p as f64
        * libm::pow(alpha * alpha + beta * beta, 0.25)
        * libm::pow(rho1 * rho1 + rho2 * rho2, 0.25)
        * libm::sqrt(c.l_hat);
    alloc::vec![1.0 / alpha, 1.0 / beta, 1.0 / (2.0 * rho1 * c.l_phi), 1.0 / denom, 1.0]
}

fn thm3_caps(c: &DerivedConstants, sc: &SmoothnessConstants, k: usize, p: usize, alpha: f64, beta: f64) -> Caps {
    let (mu, l1, lt, lh) = (sc.mu, sc.l1, c.l_tilde, c.l_hat);
    let k = k as f64;
    let a = 16.0 * lh * lh / (alpha * k);
    let b = 2000.0 * l1 * l1 * lt * lt / (3.0 * beta * mu * mu * k);
    let d = a + b + 12.0 / 25.0 * (4.0 + 1000.0 * lt * lt / (3.0 * mu * mu) + a + b);
    let rho2 = alloc::vec![1.0 / (6.0 * l1), (15.0 * lt * lt / mu) / d, 10.0];
    let rho2_v = min_of(&rho2);
    let rho1 = alloc::vec![rho2_v * mu * mu / (20.0 * lt * l1), 0.5 / libm::sqrt(d), 10.0];
    let eta = alloc::vec![
        1.0 / libm::sqrt(alpha),
        1.0 / libm::sqrt(beta),
        1.0 / (200.0 * p as f64 * lh)
    ];
    Caps { rho1, rho2, eta }
}

fn thm5_rho(c: &DerivedConstants, sc: &SmoothnessConstants) -> (Vec<f64>, Vec<f64>) {
    let (mu, l1) = (sc.mu, sc.l1);
    let rho2 = alloc::vec![15.0 * mu / 1174.0, 1.0 / (6.0 * l1), 10.0];
    let rho2_v = min_of(&rho2);
    let rho1 = alloc::vec![rho2_v * mu * mu / (60.0 * l1 * l1), mu / (100.0 * c.l_tilde), 10.0];
    (rho1, rho2)
}

fn thm5_alpha(c: &DerivedConstants, k: usize, p: usize) -> f64 {
    let (k, p) = (k as f64, p as f64);
    let lh2 = c.l_hat * c.l_hat;
    lh2 / (3.0 * p * k * k) + lh2 / k
}

/// Largest hyperparameters allowed by the selected theorem. Every bound is
/// taken literally; free `alpha`, `beta` sit at their displayed caps (or 1
/// where no cap is displayed) and strict bounds get [`STRICT_BACKOFF`].
pub fn theorem_hyperparams(
    consts: &DerivedConstants,
    sc: &SmoothnessConstants,
    neumann: NeumannConfig,
    devices: usize,
    period: usize,
    variant: TheoremVariant,
    batch: usize,
) -> Result<(HyperParams, StepSchedule)> {
    if devices == 0 || period == 0 {
        return Err(Error::invalid("devices/period", "must be positive"));
    }
    sc.validate()?;
    neumann.check_against(sc)?;
    let (hp, schedule) = match variant {
        TheoremVariant::BsgmFixed => {
            let (alpha, beta) = (1.0, 1.0);
            let (rho1, rho2) = thm1_rho(consts, sc, alpha, beta);
            let (rho1, rho2) = (min_of(&rho1), min_of(&rho2));
            let eta = STRICT_BACKOFF * min_of(&thm1_eta(consts, period, alpha, beta, rho1, rho2));
            let hp = HyperParams {
                alpha,
                beta,
                rho1,
                rho2,
                batch,
                neumann,
            };
            (hp, StepSchedule::Fixed { eta })
        }
        TheoremVariant::BsgvrmFixed => {
            let lh2 = consts.l_hat * consts.l_hat;
            let alpha = lh2 / devices as f64;
            let beta = alpha;
            let caps = thm3_caps(consts, sc, devices, period, alpha, beta);
            let hp = HyperParams {
                alpha,
                beta,
                rho1: min_of(&caps.rho1),
                rho2: min_of(&caps.rho2),
                batch,
                neumann,
            };
            (hp, StepSchedule::Fixed { eta: min_of(&caps.eta) })
        }
        TheoremVariant::BsgvrmDecaying => {
            let alpha = thm5_alpha(consts, devices, period);
            let (rho1, rho2) = thm5_rho(consts, sc);
            let rho1 = min_of(&rho1);
            let hp = HyperParams {
                alpha,
                beta: alpha,
                rho1,
                rho2: min_of(&rho2),
                batch,
                neumann,
            };
            let schedule = StepSchedule::Decaying {
                devices,
                period,
                l_hat: consts.l_hat,
                rho1,
                l_phi: consts.l_phi,
            };
            (hp, schedule)
        }
    };
    hp.validate()?;
    schedule.validate()?;
    Ok((hp, schedule))
}

/// One re-checked inequality of a theorem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintCheck {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    pub strict: bool,
}

impl ConstraintCheck {
    pub fn holds(&self) -> bool {
        // slack for bounds recomputed from the same formula
        let tol = 1e-12 * self.bound.abs();
        if self.strict {
            self.value < self.bound
        } else {
            self.value <= self.bound + tol
        }
    }
}

/// Recomputes every inequality of `variant` for the given hyperparameters.
/// For the decaying schedule, the mixing constraints are checked on
/// `eta_0`, the largest step of the non-increasing schedule.
pub fn theorem_constraints(
    consts: &DerivedConstants,
    sc: &SmoothnessConstants,
    devices: usize,
    period: usize,
    variant: TheoremVariant,
    hp: &HyperParams,
    schedule: &StepSchedule,
) -> Vec<ConstraintCheck> {
    let le = |name, value, bound| ConstraintCheck {
        name,
        value,
        bound,
        strict: false,
    };
    let lt = |name, value, bound| ConstraintCheck {
        name,
        value,
        bound,
        strict: true,
    };
    let mut out = alloc::vec![
        lt("theta < 1/L1", hp.neumann.theta(), 1.0 / sc.l1),
        lt("-alpha < 0", -hp.alpha, 0.0),
        lt("-beta < 0", -hp.beta, 0.0),
        lt("-rho1 < 0", -hp.rho1, 0.0),
        lt("-rho2 < 0", -hp.rho2, 0.0),
    ];
    let eta0 = schedule.eta(0);
    match variant {
        TheoremVariant::BsgmFixed => {
            let (rho1, rho2) = thm1_rho(consts, sc, hp.alpha, hp.beta);
            out.extend(rho1.iter().map(|&b| le("rho1 cap", hp.rho1, b)));
            out.extend(rho2.iter().map(|&b| le("rho2 cap", hp.rho2, b)));
            let etas = thm1_eta(consts, period, hp.alpha, hp.beta, hp.rho1, hp.rho2);
            out.extend(etas.iter().map(|&b| lt("eta cap", eta0, b)));
            out.push(lt("alpha eta < 1", hp.alpha * eta0, 1.0));
            out.push(lt("beta eta < 1", hp.beta * eta0, 1.0));
        }
        TheoremVariant::BsgvrmFixed => {
            let lh2 = consts.l_hat * consts.l_hat;
            out.push(le("alpha <= L_hat^2/K", hp.alpha, lh2 / devices as f64));
            out.push(le("beta <= L_hat^2/K", hp.beta, lh2 / devices as f64));
            let caps = thm3_caps(consts, sc, devices, period, hp.alpha, hp.beta);
            out.extend(caps.rho1.iter().map(|&b| le("rho1 cap", hp.rho1, b)));
            out.extend(caps.rho2.iter().map(|&b| le("rho2 cap", hp.rho2, b)));
            out.extend(caps.eta.iter().map(|&b| le("eta cap", eta0, b)));
            out.push(lt("alpha eta^2 < 1", hp.alpha * eta0 * eta0, 1.0));
            out.push(lt("beta eta^2 < 1", hp.beta * eta0 * eta0, 1.0));
        }
        TheoremVariant::BsgvrmDecaying => {
            let alpha = thm5_alpha(consts, devices, period);
            out.push(le("alpha = formula (<=)", hp.alpha, alpha));
            out.push(le("alpha = formula (>=)", -hp.alpha, -alpha));
            out.push(le("beta = formula (<=)", hp.beta, alpha));
            out.push(le("beta = formula (>=)", -hp.beta, -alpha));
            let (rho1, rho2) = thm5_rho(consts, sc);
            out.extend(rho1.iter().map(|&b| le("rho1 cap", hp.rho1, b)));
            out.extend(rho2.iter().map(|&b| le("rho2 cap", hp.rho2, b)));
            out.push(lt("alpha eta_0^2 < 1", hp.alpha * eta0 * eta0, 1.0));
            out.push(lt("beta eta_0^2 < 1", hp.beta * eta0 * eta0, 1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergrad::{derived_constants, stochastic_hypergradient};
    use crate::problems::{QuadQuad, QuadQuadParams};
    use crate::Matrix;
    use approx::assert_abs_diff_eq;

    fn hp(alpha: f64, beta: f64) -> HyperParams {
        HyperParams {
            alpha,
            beta,
            rho1: 0.1,
            rho2: 0.2,
            batch: 1,
            neumann: NeumannConfig::new(0.3, 3).unwrap(),
        }
    }

    fn scalar_noisy() -> QuadQuad {
        QuadQuad::new(
            Matrix::from_element(1, 1, 2.0),
            Matrix::from_element(1, 1, 1.0),
            Vector::zeros(1),
            1.0,
            Vector::zeros(1),
            1.0,
        )
        .unwrap()
    }

    fn s(v: f64) -> Vector {
        Vector::from_element(1, v)
    }

    #[test]
    fn bsgm_boundary_weight_discards_memory() {
        let p = scalar_noisy();
        let (x, y) = (s(0.5), s(-0.3));
        let state = EstimatorState {
            u: s(100.0),
            v: s(-100.0),
            prev: None,
        };
        let stream = RandomStream::new(1, 2);
        let next = bsgm_estimator_step(&state, &x, &y, 0.5, &hp(2.0, 2.0), &p, &mut stream.clone()).unwrap();
        let fresh = stochastic_hypergradient(&p, &x, &y, &hp(2.0, 2.0).neumann, &mut stream.clone()).unwrap();
        assert_eq!(next.u, fresh);
    }

    #[test]
    fn bsgm_half_weight_arithmetic() {
        // deterministic draw of 2 for u: lambda x with y = y_c and no noise
        let p = QuadQuad::new(
            Matrix::from_element(1, 1, 2.0),
            Matrix::from_element(1, 1, 1.0),
            Vector::zeros(1),
            1.0,
            Vector::zeros(1),
            0.0,
        )
        .unwrap();
        let state = EstimatorState {
            u: s(0.0),
            v: s(0.0),
            prev: None,
        };
        let next =
            bsgm_estimator_step(&state, &s(2.0), &s(0.0), 0.5, &hp(1.0, 1.0), &p, &mut RandomStream::new(0, 0))
                .unwrap();
        assert_eq!(next.u[0], 1.0);
    }

    #[test]
    fn bsgm_rejects_weight_above_one() {
        let p = scalar_noisy();
        let state = bsgm_init(&p, &s(0.0), &s(0.0), &hp(1.0, 1.0), &mut RandomStream::new(0, 0)).unwrap();
        let r = bsgm_estimator_step(&state, &s(0.0), &s(0.0), 1.5, &hp(1.0, 1.0), &p, &mut RandomStream::new(0, 0));
        assert!(matches!(r, Err(Error::StepConstraint { .. })));
    }

    #[test]
    fn bsgm_converges_geometrically_at_fixed_point() {
        let p = QuadQuad::generate(&QuadQuadParams { noise_std: 0.0, dim_x: 3, dim_y: 3, ..Default::default() })
            .unwrap();
        let x = Vector::from_column_slice(&[1.0, -1.0, 0.5]);
        let y = Vector::from_column_slice(&[0.2, 0.0, 0.3]);
        let params = hp(1.0, 1.0);
        let target = stochastic_hypergradient(&p, &x, &y, &params.neumann, &mut RandomStream::new(0, 0)).unwrap();
        let mut state = EstimatorState {
            u: Vector::zeros(3),
            v: Vector::zeros(3),
            prev: None,
        };
        let eta = 0.2;
        let mut stream = RandomStream::new(0, 0);
        let initial = target.norm();
        for t in 1..=20 {
            state = bsgm_estimator_step(&state, &x, &y, eta, &params, &p, &mut stream).unwrap();
            let err = (&state.u - &target).norm();
            assert_abs_diff_eq!(err, initial * libm::pow(0.8, t as f64), epsilon = 1e-12);
        }
    }

    #[test]
    fn storm_boundary_weight_gives_fresh_draw() {
        let p = scalar_noisy();
        let params = hp(4.0, 4.0);
        let state = EstimatorState {
            u: s(9.0),
            v: s(9.0),
            prev: Some((s(1.0), s(1.0))),
        };
        let stream = RandomStream::new(5, 5);
        let next = bsgvrm_estimator_step(&state, &s(0.3), &s(0.2), 0.5, &params, &p, &mut stream.clone()).unwrap();
        let fresh = stochastic_hypergradient(&p, &s(0.3), &s(0.2), &params.neumann, &mut stream.clone()).unwrap();
        assert_eq!(next.u, fresh);
        assert_eq!(next.prev, Some((s(0.3), s(0.2))));
    }

    #[test]
    fn storm_is_moving_average_at_stationary_iterate() {
        let p = scalar_noisy();
        let params = hp(1.0, 1.0);
        let (x, y) = (s(0.4), s(-0.1));
        let state = EstimatorState {
            u: s(3.0),
            v: s(-2.0),
            prev: Some((x.clone(), y.clone())),
        };
        let stream = RandomStream::new(8, 1);
        let eta = 0.5;
        let next = bsgvrm_estimator_step(&state, &x, &y, eta, &params, &p, &mut stream.clone()).unwrap();
        let fresh = stochastic_hypergradient(&p, &x, &y, &params.neumann, &mut stream.clone()).unwrap();
        let w = eta * eta;
        assert_abs_diff_eq!(next.u[0], (1.0 - w) * 3.0 + w * fresh[0], epsilon = 1e-12);
    }

    #[test]
    fn storm_requires_previous_iterate() {
        let p = scalar_noisy();
        let state = EstimatorState {
            u: s(0.0),
            v: s(0.0),
            prev: None,
        };
        let r = bsgvrm_estimator_step(&state, &s(0.0), &s(0.0), 0.1, &hp(1.0, 1.0), &p, &mut RandomStream::new(0, 0));
        assert_eq!(r, Err(Error::MissingPreviousIterate));
    }

    #[test]
    fn local_update_arithmetic() {
        let state = EstimatorState {
            u: s(2.0),
            v: s(0.0),
            prev: None,
        };
        let (x, y) = local_update(&s(1.0), &s(3.0), &state, 0.5, &hp(1.0, 1.0));
        assert_abs_diff_eq!(x[0], 0.9, epsilon = 1e-15);
        assert_eq!(y[0], 3.0);
        let zero = EstimatorState {
            u: s(0.0),
            v: s(0.0),
            prev: None,
        };
        assert_eq!(local_update(&s(1.0), &s(3.0), &zero, 0.7, &hp(1.0, 1.0)), (s(1.0), s(3.0)));
        let (x, _) = local_update(&s(1.0), &s(3.0), &state, 1e-300, &hp(1.0, 1.0));
        assert_eq!(x[0], 1.0);
    }

    fn qq_consts() -> (SmoothnessConstants, NeumannConfig, DerivedConstants) {
        let sc = QuadQuad::generate(&QuadQuadParams::default()).unwrap().smoothness();
        let cfg = NeumannConfig::new(0.9 / sc.l1, 8).unwrap();
        let c = derived_constants(&sc, &cfg);
        (sc, cfg, c)
    }

    #[test]
    fn decaying_schedule_matches_fixed_cap_for_single_device() {
        let (sc, cfg, c) = qq_consts();
        let (_, sched) = theorem_hyperparams(&c, &sc, cfg, 1, 1, TheoremVariant::BsgvrmDecaying, 1).unwrap();
        let eta0 = sched.eta(0);
        assert!((eta0 - 1.0 / (200.0 * c.l_hat)).abs() <= 1e-12 * eta0);
    }

    #[test]
    fn decaying_schedule_constant_over_warm_prefix() {
        let sched = StepSchedule::Decaying {
            devices: 1,
            period: 1,
            l_hat: 3.0,
            rho1: 1e-3,
            l_phi: 10.0,
        };
        let warm = 200usize.pow(3);
        assert_eq!(sched.eta(0), sched.eta(warm - 10));
        assert!(sched.eta(warm + 10) < sched.eta(warm));
        let mut prev = f64::INFINITY;
        for t in (0..3 * warm).step_by(997) {
            let e = sched.eta(t);
            assert!(e <= prev);
            prev = e;
        }
    }

    #[test]
    fn theorem5_values() {
        let sc = SmoothnessConstants {
            mu: 1.0,
            l0: 2.0,
            l1: 1.0,
            l21: 0.0,
            l22: 0.0,
            sigma: 0.1,
        };
        let cfg = NeumannConfig::new(0.9, 5).unwrap();
        let c = derived_constants(&sc, &cfg);
        let (k, p) = (4, 3);
        let (h, _) = theorem_hyperparams(&c, &sc, cfg, k, p, TheoremVariant::BsgvrmDecaying, 1).unwrap();
        let lh2 = c.l_hat * c.l_hat;
        assert_eq!(h.alpha, lh2 / (3.0 * 3.0 * 16.0) + lh2 / 4.0);
        assert_eq!(h.rho2, 15.0 / 1174.0);
    }

    #[test]
    fn theorem1_eta_respects_smoothness_cap() {
        let (sc, cfg, c) = qq_consts();
        let (h, sched) = theorem_hyperparams(&c, &sc, cfg, 4, 4, TheoremVariant::BsgmFixed, 1).unwrap();
        assert!(sched.eta(0) < 1.0 / (2.0 * h.rho1 * c.l_phi));
    }

    #[test]
    fn theta_must_be_below_inverse_l1() {
        let (sc, _, c) = qq_consts();
        let bad = NeumannConfig::new(1.0 / sc.l1, 2).unwrap();
        assert!(theorem_hyperparams(&c, &sc, bad, 1, 2, TheoremVariant::BsgmFixed, 1).is_err());
    }

    #[test]
    fn sample_counts() {
        let cfg = NeumannConfig::new(0.1, 4).unwrap();
        assert_eq!(Algorithm::LocalBsgm.samples_at(0, &cfg, 9), 7);
        assert_eq!(Algorithm::LocalBsgm.samples_at(5, &cfg, 9), 7);
        assert_eq!(Algorithm::LocalBsgvrm.samples_at(0, &cfg, 9), 63);
        assert_eq!(Algorithm::LocalBsgvrm.samples_at(1, &cfg, 9), 14);
    }
}
