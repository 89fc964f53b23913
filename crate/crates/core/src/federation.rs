//! K-device simulation with local steps and periodic averaging.
//!
//! Every device owns its iterate, its estimator state and a random stream
//! keyed by its index. Within an iteration devices are independent, so an
//! executor may step them concurrently; averaging is a barrier and always
//! sums devices in index order, which makes a run bit-identical for any
//! executor.

use alloc::vec::Vec;

use crate::algorithms::{
    bsgm_estimator_step, bsgm_init, bsgvrm_estimator_step, bsgvrm_init, local_update, Algorithm,
    EstimatorState, HyperParams, StepSchedule,
};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{mean_of, RandomStream};
use crate::problems::{BilevelOracle, OracleQuery};
use crate::Vector;

/// Stream id used for the lower-level warm start of LocalBSGVRM.
const WARM_START_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub devices: usize,
    /// Communication period `p`; `p = 1` averages after every step.
    pub period: usize,
    pub iterations: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub hp: HyperParams,
    pub schedule: StepSchedule,
    pub x0: Vector,
    /// Starting `y`. LocalBSGVRM replaces it with `y*(x0)` (or a warm start).
    pub y0: Vector,
    /// `L_tilde`, the weight of the lower-level gap in the metric.
    pub metric_weight: f64,
    pub bytes_per_scalar: u64,
    /// Count the server broadcast in addition to device uploads.
    pub count_broadcast: bool,
    /// Debug mode: every device draws from stream 0.
    pub shared_streams: bool,
    /// Abort when any state norm exceeds this.
    pub divergence_limit: f64,
}

impl FederationConfig {
    /// Defaults for everything except the algorithm, hyperparameters and
    /// starting point.
    pub fn new(
        algorithm: Algorithm,
        hp: HyperParams,
        schedule: StepSchedule,
        x0: Vector,
        y0: Vector,
    ) -> Self {
        Self {
            devices: 1,
            period: 1,
            iterations: 1,
            seed: 0,
            algorithm,
            hp,
            schedule,
            x0,
            y0,
            metric_weight: 1.0,
            bytes_per_scalar: 8,
            count_broadcast: true,
            shared_streams: false,
            divergence_limit: 1e6,
        }
    }

    pub fn validate<O: BilevelOracle + ?Sized>(&self, oracle: &O) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::invalid("devices", "must be at least 1"));
        }
        if self.period == 0 {
            return Err(Error::invalid("period", "must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be at least 1"));
        }
        if !(self.metric_weight >= 0.0) || !self.metric_weight.is_finite() {
            return Err(Error::invalid("metric_weight", "must be finite and non-negative"));
        }
        if self.bytes_per_scalar == 0 {
            return Err(Error::invalid("bytes_per_scalar", "must be positive"));
        }
        if !(self.divergence_limit > 0.0) {
            return Err(Error::invalid("divergence_limit", "must be positive"));
        }
        self.hp.validate()?;
        self.schedule.validate()?;
        let dims = oracle.dims();
        check_dim("x0", dims.x, self.x0.len())?;
        check_dim("y0", dims.y, self.y0.len())
    }

    /// Bytes moved in one direction by one communication round: every device
    /// sends `(u, v, x, y)`.
    pub fn bytes_per_round_one_way(&self, dim_x: usize, dim_y: usize) -> u64 {
        self.devices as u64 * 2 * (dim_x + dim_y) as u64 * self.bytes_per_scalar
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceState {
    pub device_id: usize,
    pub x: Vector,
    pub y: Vector,
    /// `None` until the first estimator step.
    pub est: Option<EstimatorState>,
    pub stream: RandomStream,
}

impl DeviceState {
    fn max_norm(&self) -> f64 {
        let mut m = self.x.norm().max(self.y.norm());
        if let Some(est) = &self.est {
            m = m.max(est.u.norm()).max(est.v.norm());
        }
        if m.is_nan() {
            f64::INFINITY
        } else {
            m
        }
    }
}

/// Runs the per-device phase of an iteration.
pub trait DeviceExecutor {
    /// Applies `step` to every device. Implementations may run devices in
    /// any order or concurrently; when several devices fail, the error of the
    /// lowest device index is returned.
    fn for_each_device(
        &self,
        devices: &mut [DeviceState],
        step: &(dyn Fn(&mut DeviceState) -> Result<()> + Sync),
    ) -> Result<()>;
}

/// Steps devices one after another.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl DeviceExecutor for Sequential {
    fn for_each_device(
        &self,
        devices: &mut [DeviceState],
        step: &(dyn Fn(&mut DeviceState) -> Result<()> + Sync),
    ) -> Result<()> {
        devices.iter_mut().try_for_each(step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    pub eta: f64,
    /// `|grad Phi(x_bar_t)|^2`, when the oracle has exact hypergradients.
    pub grad_norm_sq: Option<f64>,
    /// `|y_bar_t - y*(x_bar_t)|^2`.
    pub lower_gap_sq: Option<f64>,
    /// Prefix average of the metric over iterations `0..=t`.
    pub metric_running: Option<f64>,
    /// Oracle evaluations per device after iteration `t`.
    pub samples: u64,
    /// Communication rounds after iteration `t`, i.e. `floor((t + 1) / p)`.
    pub rounds: u64,
    pub bytes_upload: u64,
    pub bytes_broadcast: u64,
}

impl IterationRecord {
    pub fn bytes(&self) -> u64 {
        self.bytes_upload + self.bytes_broadcast
    }

    pub fn metric(&self, l_tilde: f64) -> Option<f64> {
        Some(self.grad_norm_sq? + l_tilde * l_tilde * self.lower_gap_sq?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub final_metric: Option<f64>,
    /// Largest norm of any device's `x` or `y` during the run.
    pub max_iterate_norm: f64,
    /// Whether an iterate left the region the smoothness constants hold on.
    pub left_region: bool,
    /// Oracle evaluations spent on the lower-level warm start.
    pub warm_start_samples: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub records: Vec<IterationRecord>,
    pub summary: RunSummary,
}

/// Replaces `u`, `v`, `x` and `y` on every device by their device average.
/// Devices must already be initialized.
pub fn average_and_reset(devices: &mut [DeviceState]) {
    let Some(first) = devices.first() else { return };
    let (dx, dy) = (first.x.len(), first.y.len());
    let x = mean_of(dx, devices.iter().map(|d| &d.x));
    let y = mean_of(dy, devices.iter().map(|d| &d.y));
    let u = mean_of(dx, devices.iter().filter_map(|d| d.est.as_ref().map(|e| &e.u)));
    let v = mean_of(dy, devices.iter().filter_map(|d| d.est.as_ref().map(|e| &e.v)));
    for d in devices.iter_mut() {
        d.x.copy_from(&x);
        d.y.copy_from(&y);
        if let Some(est) = d.est.as_mut() {
            est.u.copy_from(&u);
            est.v.copy_from(&v);
        }
    }
}

fn warm_start_lower<O: BilevelOracle + ?Sized>(
    oracle: &O,
    cfg: &FederationConfig,
) -> Result<(Vector, u64)> {
    if oracle.has_exact_lower_solution() {
        return Ok((oracle.exact_lower_solution(&cfg.x0)?, 0));
    }
    let step = cfg.hp.rho2 * cfg.schedule.eta(0);
    let mu = oracle.smoothness().mu;
    let steps = libm::ceil(50.0 / (step * mu)) as u64;
    let mut stream = RandomStream::new(cfg.seed, WARM_START_STREAM);
    let mut y = cfg.y0.clone();
    for _ in 0..steps {
        let q = OracleQuery::new(&cfg.x0, &y, stream.take(oracle.sample_width()));
        let g = oracle.grad_y_g(&q)?;
        y.axpy(-step, &g, 1.0);
    }
    Ok((y, steps))
}

/// Runs the configured algorithm sequentially.
pub fn run<O: BilevelOracle + ?Sized>(cfg: &FederationConfig, oracle: &O) -> Result<RunTrace> {
    run_with(cfg, oracle, &Sequential)
}

/// Runs the configured algorithm, stepping devices through `executor`.
pub fn run_with<O, E>(cfg: &FederationConfig, oracle: &O, executor: &E) -> Result<RunTrace>
where
    O: BilevelOracle + ?Sized,
    E: DeviceExecutor + ?Sized,
{
    cfg.validate(oracle)?;
    let dims = oracle.dims();
    let exact = oracle.has_exact_hypergradient() && oracle.has_exact_lower_solution();
    let radius = oracle.region_radius();

    let (y_start, warm_start_samples) = match cfg.algorithm {
        Algorithm::LocalBsgm => (cfg.y0.clone(), 0),
        Algorithm::LocalBsgvrm => warm_start_lower(oracle, cfg)?,
    };
    let mut devices: Vec<DeviceState> = (0..cfg.devices)
        .map(|k| DeviceState {
            device_id: k,
            x: cfg.x0.clone(),
            y: y_start.clone(),
            est: None,
            stream: RandomStream::new(cfg.seed, if cfg.shared_streams { 0 } else { k as u64 }),
        })
        .collect();

    let one_way = cfg.bytes_per_round_one_way(dims.x, dims.y);
    let mut records = Vec::with_capacity(cfg.iterations);
    let (mut samples, mut rounds, mut up, mut down) = (0u64, 0u64, 0u64, 0u64);
    let mut metric_sum = 0.0;
    let mut max_norm = 0.0f64;

    for t in 0..cfg.iterations {
        let x_bar = mean_of(dims.x, devices.iter().map(|d| &d.x));
        let y_bar = mean_of(dims.y, devices.iter().map(|d| &d.y));
        max_norm = devices.iter().fold(max_norm, |m, d| m.max(d.x.norm()).max(d.y.norm()));
        let (grad_norm_sq, lower_gap_sq) = if exact {
            let g = oracle.exact_hypergradient(&x_bar)?;
            let ys = oracle.exact_lower_solution(&x_bar)?;
            (Some(g.norm_squared()), Some((&y_bar - ys).norm_squared()))
        } else {
            (None, None)
        };

        let eta = cfg.schedule.eta(t);
        let eta_prev = if t == 0 { eta } else { cfg.schedule.eta(t - 1) };
        let step = |d: &mut DeviceState| -> Result<()> {
            let est = match (&d.est, cfg.algorithm) {
                (None, Algorithm::LocalBsgm) => bsgm_init(oracle, &d.x, &d.y, &cfg.hp, &mut d.stream)?,
                (None, Algorithm::LocalBsgvrm) => bsgvrm_init(oracle, &d.x, &d.y, &cfg.hp, &mut d.stream)?,
                (Some(prev), Algorithm::LocalBsgm) => {
                    bsgm_estimator_step(prev, &d.x, &d.y, eta, &cfg.hp, oracle, &mut d.stream)?
                }
                (Some(prev), Algorithm::LocalBsgvrm) => {
                    bsgvrm_estimator_step(prev, &d.x, &d.y, eta_prev, &cfg.hp, oracle, &mut d.stream)?
                }
            };
            let (x, y) = local_update(&d.x, &d.y, &est, eta, &cfg.hp);
            d.x = x;
            d.y = y;
            d.est = Some(est);
            let norm = d.max_norm();
            if norm > cfg.divergence_limit {
                return Err(Error::Diverged {
                    iteration: t,
                    device: d.device_id,
                    norm,
                    limit: cfg.divergence_limit,
                });
            }
            Ok(())
        };
        executor.for_each_device(&mut devices, &step)?;

        if (t + 1) % cfg.period == 0 {
            average_and_reset(&mut devices);
            rounds += 1;
            up += one_way;
            if cfg.count_broadcast {
                down += one_way;
            }
        }
        samples += cfg.algorithm.samples_at(t, &cfg.hp.neumann, cfg.hp.batch);

        let metric_running = match (grad_norm_sq, lower_gap_sq) {
            (Some(g), Some(gap)) => {
                metric_sum += g + cfg.metric_weight * cfg.metric_weight * gap;
                Some(metric_sum / (t + 1) as f64)
            }
            _ => None,
        };
        records.push(IterationRecord {
            t,
            eta,
            grad_norm_sq,
            lower_gap_sq,
            metric_running,
            samples,
            rounds,
            bytes_upload: up,
            bytes_broadcast: down,
        });
    }
    max_norm = devices.iter().fold(max_norm, |m, d| m.max(d.x.norm()).max(d.y.norm()));

    Ok(RunTrace {
        summary: RunSummary {
            final_metric: records.last().and_then(|r| r.metric_running),
            max_iterate_norm: max_norm,
            left_region: max_norm > radius,
            warm_start_samples,
        },
        records,
    })
}

/// `(1/T) sum_t (|grad Phi(x_bar_t)|^2 + L_tilde^2 |y_bar_t - y*(x_bar_t)|^2)`.
pub fn convergence_metric(trace: &RunTrace, l_tilde: f64) -> Result<f64> {
    if trace.records.is_empty() {
        return Err(Error::invalid("trace", "no iterations recorded"));
    }
    let mut sum = 0.0;
    for r in &trace.records {
        sum += r.metric(l_tilde).ok_or(Error::Unsupported("exact convergence metric"))?;
    }
    Ok(sum / trace.records.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Accounting {
    pub samples_per_device: u64,
    pub rounds: u64,
    pub bytes: u64,
    pub bytes_upload: u64,
    pub bytes_broadcast: u64,
}

/// Totals recorded in a completed trace.
pub fn accounting(trace: &RunTrace) -> Accounting {
    let last = trace.records.last();
    Accounting {
        samples_per_device: last.map_or(0, |r| r.samples),
        rounds: last.map_or(0, |r| r.rounds),
        bytes: last.map_or(0, |r| r.bytes()),
        bytes_upload: last.map_or(0, |r| r.bytes_upload),
        bytes_broadcast: last.map_or(0, |r| r.bytes_broadcast),
    }
}

/// Closed-form totals for a run of `cfg`:
/// `rounds = floor(T/p)`,
/// `bytes = rounds * K * 2(d_x + d_y) * bytes_per_scalar * (2 with broadcast, else 1)`,
/// samples per device `(Q+3) T` for LocalBSGM and
/// `(Q+3) B + 2 (Q+3)(T-1)` for LocalBSGVRM.
pub fn expected_accounting(cfg: &FederationConfig, dim_x: usize, dim_y: usize) -> Accounting {
    let rounds = (cfg.iterations / cfg.period) as u64;
    let one_way = rounds * cfg.bytes_per_round_one_way(dim_x, dim_y);
    let down = if cfg.count_broadcast { one_way } else { 0 };
    let per_draw = cfg.hp.neumann.terms() as u64 + 3;
    let t = cfg.iterations as u64;
    let samples = match cfg.algorithm {
        Algorithm::LocalBsgm => per_draw * t,
        Algorithm::LocalBsgvrm => per_draw * cfg.hp.batch as u64 + 2 * per_draw * t.saturating_sub(1),
    };
    Accounting {
        samples_per_device: samples,
        rounds,
        bytes: one_way + down,
        bytes_upload: one_way,
        bytes_broadcast: down,
    }
}
