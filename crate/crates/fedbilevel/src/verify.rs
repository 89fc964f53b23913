//! Self-check suite: each check reports a measured value against a
//! threshold.
//!
//! Checks run on a QuadQuad instance. Fault mode flips the sign of the
//! mixed second-derivative term in the oracle and in the closed-form
//! hypergradient; only the finite-difference check can see that, because
//! every other check compares the oracle against itself.

use std::cell::RefCell;
use std::io::Write;

use anyhow::{bail, Result};

use fedbilevel_core::algorithms::{
    bsgvrm_estimator_step, bsgvrm_init, local_update, theorem_constraints, theorem_hyperparams, Algorithm,
    HyperParams, StepSchedule, TheoremVariant,
};
use fedbilevel_core::federation::{
    accounting, expected_accounting, run, run_with, DeviceExecutor, DeviceState, FederationConfig, Sequential,
};
use fedbilevel_core::hypergrad::{derived_constants, measure_bias, stochastic_hypergradient, NeumannConfig};
use fedbilevel_core::numerics::{default_step, finite_diff_grad, max_abs, mean_of, RandomStream};
use fedbilevel_core::problems::{BilevelOracle, OracleQuery, QuadQuad};
use fedbilevel_core::{Matrix, Vector};

use crate::config::{ExperimentConfig, Family};
use crate::experiment::Problem;

pub const FD_POINTS: usize = 100;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const STORM_STEPS: usize = 500;
pub const STORM_TOLERANCE: f64 = 1e-10;
pub const CONSENSUS_STEPS: usize = 2000;
pub const CONSENSUS_TOLERANCE: f64 = 1e-12;
pub const SCHEDULE_HORIZON: usize = 1_000_000;
pub const BIAS_TERMS: [usize; 3] = [0, 4, 8];

const FD_STREAM: u64 = 0x4644;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    /// `<` when true, `<=` otherwise.
    pub strict: bool,
    pub threshold: f64,
}

impl Check {
    fn new(name: impl Into<String>, measured: f64, strict: bool, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            strict,
            threshold,
        }
    }

    pub fn passed(&self) -> bool {
        if self.strict {
            self.measured < self.threshold
        } else {
            self.measured <= self.threshold
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// CSV with columns `check,measured,relation,threshold,status`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["check", "measured", "relation", "threshold", "status"])?;
        for c in &self.checks {
            w.write_record([
                c.name.clone(),
                c.measured.to_string(),
                if c.strict { "<" } else { "<=" }.to_string(),
                c.threshold.to_string(),
                if c.passed() { "pass" } else { "fail" }.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest relative error between the closed-form hypergradient and central
/// differences of `Phi` over `n` random points.
pub fn hypergradient_fd_error(problem: &dyn BilevelOracle, n: usize, seed: u64) -> Result<f64> {
    let mut stream = RandomStream::new(seed, FD_STREAM);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let x = stream.gaussian_vec(problem.dims().x, 1.0);
        let exact = problem.exact_hypergradient(&x)?;
        let h = default_step(&x);
        // an oracle error poisons the difference and the check fails
        let fd = finite_diff_grad(|p| problem.hyper_objective(p).unwrap_or(f64::NAN), &x, h)?;
        let rel = (&exact - &fd).norm() / fd.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Largest `|I - theta H_j|_2` over `draws` sampled lower-level Hessians at
/// `(x, y)`, with `H_j` assembled column by column from Hessian-vector
/// products.
pub fn contraction_factor(
    problem: &dyn BilevelOracle,
    x: &Vector,
    y: &Vector,
    theta: f64,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let dy = problem.dims().y;
    let mut stream = RandomStream::new(seed, FD_STREAM + 1);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let q = OracleQuery::new(x, y, stream.take(problem.sample_width()));
        let mut m = Matrix::identity(dy, dy);
        for j in 0..dy {
            let e = Vector::from_fn(dy, |i, _| if i == j { 1.0 } else { 0.0 });
            let col = problem.hvp_yy_g(&q, &e)?;
            m.set_column(j, &(m.column(j) - col * theta));
        }
        worst = worst.max(m.singular_values().max());
    }
    Ok(worst)
}

/// Largest deviation of the STORM estimates from fresh gradient evaluations
/// at the current iterate, on a noise-free problem.
pub fn storm_deviation(problem: &dyn BilevelOracle, hp: &HyperParams, eta: f64, steps: usize) -> Result<f64> {
    if problem.noise_std() != 0.0 {
        bail!("STORM exactness needs a noise-free problem");
    }
    let dims = problem.dims();
    let mut x = Vector::from_element(dims.x, 1.0);
    let mut y = Vector::zeros(dims.y);
    let mut stream = RandomStream::new(0, 0);
    let mut probe = RandomStream::new(1, 1);
    let mut est = bsgvrm_init(problem, &x, &y, hp, &mut stream)?;
    let mut worst = 0.0f64;
    for t in 0..steps {
        if t > 0 {
            est = bsgvrm_estimator_step(&est, &x, &y, eta, hp, problem, &mut stream)?;
        }
        let u = stochastic_hypergradient(problem, &x, &y, &hp.neumann, &mut probe)?;
        let v = problem.grad_y_g(&OracleQuery::new(&x, &y, probe.take(problem.sample_width())))?;
        worst = worst.max(max_abs(&(&est.u - u))).max(max_abs(&(&est.v - v)));
        (x, y) = local_update(&x, &y, &est, eta, hp);
    }
    Ok(worst)
}

#[derive(Clone, Debug, Default)]
struct Observed {
    calls: usize,
    pre: Option<[Vector; 4]>,
    rounds: usize,
    consensus: f64,
    mean_shift: f64,
}

/// Executor that steps devices sequentially and inspects every averaging
/// round of the run: the state it sees at the start of an iteration that
/// follows a round is compared with the state it left behind.
pub struct AveragingObserver {
    period: usize,
    seen: RefCell<Observed>,
}

impl AveragingObserver {
    pub fn new(period: usize) -> Self {
        Self {
            period,
            seen: RefCell::new(Observed::default()),
        }
    }

    /// `(rounds observed, max cross-device discrepancy, max mean shift)`.
    pub fn results(&self) -> (usize, f64, f64) {
        let s = self.seen.borrow();
        (s.rounds, s.consensus, s.mean_shift)
    }
}

fn means(devices: &[DeviceState]) -> Option<[Vector; 4]> {
    let est: Vec<_> = devices.iter().map(|d| d.est.as_ref()).collect::<Option<_>>()?;
    let (dx, dy) = (devices[0].x.len(), devices[0].y.len());
    Some([
        mean_of(dx, devices.iter().map(|d| &d.x)),
        mean_of(dy, devices.iter().map(|d| &d.y)),
        mean_of(dx, est.iter().map(|e| &e.u)),
        mean_of(dy, est.iter().map(|e| &e.v)),
    ])
}

impl DeviceExecutor for AveragingObserver {
    fn for_each_device(
        &self,
        devices: &mut [DeviceState],
        step: &(dyn Fn(&mut DeviceState) -> fedbilevel_core::Result<()> + Sync),
    ) -> fedbilevel_core::Result<()> {
        let mut seen = self.seen.borrow_mut();
        if seen.calls > 0 && seen.calls.is_multiple_of(self.period) {
            if let (Some(pre), Some(post)) = (seen.pre.take(), means(devices)) {
                seen.rounds += 1;
                for (a, b) in pre.iter().zip(&post) {
                    seen.mean_shift = seen.mean_shift.max(max_abs(&(a - b)));
                }
                for d in devices.iter() {
                    let est = d.est.as_ref().expect("initialized");
                    let parts = [&d.x, &d.y, &est.u, &est.v];
                    for (v, m) in parts.into_iter().zip(&post) {
                        seen.consensus = seen.consensus.max(max_abs(&(v - m)));
                    }
                }
            }
        }
        Sequential.for_each_device(devices, step)?;
        seen.pre = means(devices);
        seen.calls += 1;
        Ok(())
    }
}

fn quadquad(cfg: Option<&ExperimentConfig>, fault: bool) -> Result<QuadQuad> {
    let default = ExperimentConfig::default();
    let cfg = cfg.unwrap_or(&default);
    if cfg.problem.family != Family::QuadQuad {
        bail!("invalid value for `problem.family`: the verification suite runs on quadquad");
    }
    cfg.validate()?;
    match Problem::build(&cfg.problem, fault)? {
        Problem::QuadQuad(q) => Ok(q),
        Problem::Ridge(_) => unreachable!(),
    }
}

/// Runs every check. `cfg` selects the QuadQuad instance and the federation
/// shape used by the consensus run.
pub fn verify(cfg: Option<&ExperimentConfig>, fault: bool) -> Result<Report> {
    let problem = quadquad(cfg, fault)?;
    let default = ExperimentConfig::default();
    let cfg = cfg.unwrap_or(&default);
    let sc = problem.smoothness();
    let neumann = NeumannConfig::for_target(&sc, cfg.algorithm.epsilon)?;
    let consts = derived_constants(&sc, &neumann);
    let dims = problem.dims();
    let x0 = Vector::from_element(dims.x, cfg.federation.x0);
    let mut checks = Vec::new();

    checks.push(Check::new(
        "hypergradient_fd_rel_error",
        hypergradient_fd_error(&problem, FD_POINTS, 0)?,
        false,
        FD_TOLERANCE,
    ));

    let y0 = problem.exact_lower_solution(&x0)?;
    checks.push(Check::new(
        "neumann_contraction",
        contraction_factor(&problem, &x0, &y0, neumann.theta(), 20, 0)?,
        true,
        1.0,
    ));

    let quiet = problem.clone().with_noise_std(0.0);
    let quiet_sc = quiet.smoothness();
    for q in BIAS_TERMS {
        let cfg_q = NeumannConfig::new(neumann.theta(), q)?;
        let bound = derived_constants(&quiet_sc, &cfg_q).delta_q;
        let bias = measure_bias(&quiet, &x0, &cfg_q, 1, &mut RandomStream::new(0, 0))?;
        checks.push(Check::new(format!("neumann_bias_q{q}"), bias, false, bound));
    }

    let manual = HyperParams {
        alpha: 1.0,
        beta: 1.0,
        rho1: 1.0,
        rho2: 1.0,
        batch: cfg.federation.batch,
        neumann,
    };
    checks.push(Check::new(
        "storm_exactness",
        storm_deviation(&quiet, &manual, 0.05, STORM_STEPS)?,
        false,
        STORM_TOLERANCE,
    ));

    let devices = cfg.federation.devices.max(2);
    let period = cfg.federation.period;
    let mut fed = FederationConfig::new(
        Algorithm::LocalBsgm,
        manual,
        StepSchedule::Fixed { eta: 0.05 },
        x0.clone(),
        Vector::zeros(dims.y),
    );
    fed.devices = devices;
    fed.period = period;
    fed.iterations = CONSENSUS_STEPS;
    fed.metric_weight = consts.l_tilde;
    let observer = AveragingObserver::new(period);
    let trace = run_with(&fed, &problem, &observer)?;
    let (rounds, consensus, shift) = observer.results();
    checks.push(Check::new("consensus_after_averaging", consensus, false, CONSENSUS_TOLERANCE));
    checks.push(Check::new("mean_preserved_by_averaging", shift, false, CONSENSUS_TOLERANCE));
    // a round after the last iteration is never followed by an executor call
    let expected_rounds = (CONSENSUS_STEPS - 1) / period;
    checks.push(Check::new(
        "averaging_rounds_observed_mismatch",
        rounds.abs_diff(expected_rounds) as f64,
        false,
        0.0,
    ));

    let mut mismatches = 0u32;
    for (t, p, broadcast) in [(10usize, 3usize, true), (12, 4, false), (7, 1, true)] {
        let mut c = fed.clone();
        c.iterations = t;
        c.period = p;
        c.count_broadcast = broadcast;
        for algorithm in [Algorithm::LocalBsgm, Algorithm::LocalBsgvrm] {
            c.algorithm = algorithm;
            if accounting(&run(&c, &problem)?) != expected_accounting(&c, dims.x, dims.y) {
                mismatches += 1;
            }
        }
    }
    let acc = accounting(&trace);
    if acc != expected_accounting(&fed, dims.x, dims.y) {
        mismatches += 1;
    }
    checks.push(Check::new("accounting_mismatches", mismatches as f64, false, 0.0));

    let (_, decaying_k1) = theorem_hyperparams(&consts, &sc, neumann, 1, 1, TheoremVariant::BsgvrmDecaying, 1)?;
    let cap = 1.0 / (200.0 * consts.l_hat);
    checks.push(Check::new(
        "schedule_eta0_rel_error",
        (decaying_k1.eta(0) - cap).abs() / cap,
        false,
        1e-12,
    ));
    let (hp5, sched5) =
        theorem_hyperparams(&consts, &sc, neumann, devices, period, TheoremVariant::BsgvrmDecaying, 1)?;
    let (increase, worst) = schedule_profile(&sched5, hp5.alpha.max(hp5.beta), SCHEDULE_HORIZON);
    checks.push(Check::new("schedule_max_increase", increase, false, 0.0));
    checks.push(Check::new("schedule_max_alpha_eta_sq", worst, true, 1.0));

    let mut violated = 0u32;
    for variant in [
        TheoremVariant::BsgmFixed,
        TheoremVariant::BsgvrmFixed,
        TheoremVariant::BsgvrmDecaying,
    ] {
        let (hp, s) = theorem_hyperparams(&consts, &sc, neumann, devices, period, variant, 1)?;
        violated += theorem_constraints(&consts, &sc, devices, period, variant, &hp, &s)
            .iter()
            .filter(|c| !c.holds())
            .count() as u32;
    }
    checks.push(Check::new("theorem_constraint_violations", violated as f64, false, 0.0));

    Ok(Report { checks })
}

/// `(max eta_{t+1} - eta_t, max weight * eta_t^2)` over `t < horizon`.
pub fn schedule_profile(schedule: &StepSchedule, weight: f64, horizon: usize) -> (f64, f64) {
    let mut increase = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    let mut prev = schedule.eta(0);
    for t in 0..horizon {
        let eta = schedule.eta(t);
        if t > 0 {
            increase = increase.max(eta - prev);
        }
        worst = worst.max(weight * eta * eta);
        prev = eta;
    }
    (increase.max(0.0), worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let report = verify(None, false).unwrap();
        for c in &report.checks {
            assert!(c.passed(), "{c:?}");
        }
        assert!(report.check("neumann_bias_q4").is_some());
    }

    #[test]
    fn fault_only_breaks_the_finite_difference_check() {
        let report = verify(None, true).unwrap();
        for c in &report.checks {
            assert_eq!(c.passed(), c.name != "hypergradient_fd_rel_error", "{c:?}");
        }
    }

    #[test]
    fn report_csv_has_one_line_per_check() {
        let report = Report {
            checks: vec![Check::new("a", 0.5, true, 1.0), Check::new("b", 2.0, false, 1.0)],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "check,measured,relation,threshold,status\na,0.5,<,1,pass\nb,2,<=,1,fail\n"
        );
        assert!(!report.passed());
    }
}
