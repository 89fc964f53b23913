//! Parameter sweeps over K, p, Q or the algorithm.
//!
//! Every swept value runs over all seeds. Iterations-to-epsilon is the first
//! iteration count at which the running (prefix-averaged) metric is at most
//! epsilon; the `mean` row uses the running metric averaged over seeds.

use std::time::Instant;

use anyhow::{bail, Context, Result};

use fedbilevel_core::federation::{run_with, IterationRecord, RunTrace, Sequential};
use fedbilevel_core::hypergrad::measure_bias;
use fedbilevel_core::numerics::RandomStream;

use crate::config::{Axis, ExperimentConfig, Mode};
use crate::executor::Workers;
use crate::experiment::{setup, Problem, Setup};

const BIAS_STREAM: u64 = 0x4249_4153;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hit {
    /// Iterations performed when the threshold was first met.
    pub iterations: usize,
    pub samples: u64,
    pub rounds: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub final_metric: Option<f64>,
    pub hit: Option<Hit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanOutcome {
    pub final_metric: Option<f64>,
    pub hit: Option<Hit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub seeds: Vec<SeedOutcome>,
    pub mean: MeanOutcome,
    /// Iterations at `K = 1` over iterations here (axis K only).
    pub speedup: Option<f64>,
    /// Measured hypergradient bias at `x0` (axis Q only).
    pub bias: Option<f64>,
    pub delta_q: f64,
    /// Summed run time of this value's seeds, when timing is on.
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: Axis,
    pub epsilon: f64,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn point(&self, value: &str) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.value == value)
    }
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub axis: Axis,
    pub values: Vec<String>,
    pub epsilon: f64,
    pub seeds: Vec<u64>,
    pub fault: bool,
    pub timing: bool,
}

/// Config for one swept value.
pub fn apply(base: &ExperimentConfig, axis: Axis, value: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let count = || -> Result<usize> {
        value
            .trim()
            .parse()
            .with_context(|| format!("sweep value `{value}` is not a count"))
    };
    match axis {
        Axis::Devices => cfg.federation.devices = count()?,
        Axis::Period => cfg.federation.period = count()?,
        Axis::Terms => cfg.algorithm.terms = Some(count()?),
        Axis::Algorithm => cfg.algorithm.mode = value.trim().parse::<Mode>().map_err(anyhow::Error::msg)?,
    }
    Ok(cfg)
}

/// First record whose running metric is at most `epsilon`.
pub fn first_hit<I>(records: &[IterationRecord], running: I, epsilon: f64) -> Option<Hit>
where
    I: IntoIterator<Item = Option<f64>>,
{
    records
        .iter()
        .zip(running)
        .find(|(_, m)| m.is_some_and(|m| m <= epsilon))
        .map(|(r, _)| Hit {
            iterations: r.t + 1,
            samples: r.samples,
            rounds: r.rounds,
        })
}

/// Running metric averaged over traces, in trace order.
pub fn mean_running(traces: &[&RunTrace]) -> Vec<Option<f64>> {
    let len = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let mut sum = 0.0;
            for t in traces {
                sum += t.records[i].metric_running?;
            }
            Some(sum / traces.len() as f64)
        })
        .collect()
}

pub fn run_sweep(base: &ExperimentConfig, opts: &SweepOptions, workers: &Workers) -> Result<SweepResult> {
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        bail!("invalid value for `sweep.epsilon`: must be positive");
    }
    if opts.values.is_empty() {
        bail!("invalid value for `sweep.values`: need at least one value");
    }
    if opts.seeds.is_empty() {
        bail!("invalid value for `federation.seeds`: must list at least one seed");
    }
    base.validate()?;
    let problem = Problem::build(&base.problem, opts.fault)?;

    let setups: Vec<Setup> = opts
        .values
        .iter()
        .map(|v| {
            let cfg = apply(base, opts.axis, v)?;
            setup(&cfg, &problem).with_context(|| format!("{} = {v}", opts.axis.as_str()))
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, u64)> = (0..setups.len())
        .flat_map(|i| opts.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let runs = workers.map(&jobs, |&(i, seed)| {
        let mut fed = setups[i].federation.clone();
        fed.seed = seed;
        let start = Instant::now();
        let trace = run_with(&fed, problem.oracle(), &Sequential)
            .with_context(|| format!("{} = {}, seed {seed}", opts.axis.as_str(), opts.values[i]))?;
        Ok((trace, start.elapsed().as_secs_f64()))
    });
    let runs: Vec<(RunTrace, f64)> = runs.into_iter().collect::<Result<_>>()?;

    let bias = |s: &Setup| -> Result<Option<f64>> {
        let oracle = problem.oracle();
        if opts.axis != Axis::Terms || !oracle.has_exact_hypergradient() || !oracle.has_exact_lower_solution() {
            return Ok(None);
        }
        let mut stream = RandomStream::new(opts.seeds[0], BIAS_STREAM);
        let draws = base.sweep.bias_draws;
        Ok(Some(measure_bias(oracle, &s.federation.x0, &s.neumann, draws, &mut stream)?))
    };

    let n_seeds = opts.seeds.len();
    let mut points = Vec::with_capacity(setups.len());
    for (i, s) in setups.iter().enumerate() {
        let chunk = &runs[i * n_seeds..(i + 1) * n_seeds];
        let seeds = chunk
            .iter()
            .zip(&opts.seeds)
            .map(|((trace, _), &seed)| SeedOutcome {
                seed,
                final_metric: trace.summary.final_metric,
                hit: first_hit(&trace.records, trace.records.iter().map(|r| r.metric_running), opts.epsilon),
            })
            .collect();
        let traces: Vec<&RunTrace> = chunk.iter().map(|(t, _)| t).collect();
        let running = mean_running(&traces);
        let mean = MeanOutcome {
            final_metric: running.last().copied().flatten(),
            hit: first_hit(&traces[0].records, running, opts.epsilon),
        };
        points.push(SweepPoint {
            value: opts.values[i].clone(),
            seeds,
            mean,
            speedup: None,
            bias: bias(s)?,
            delta_q: s.consts.delta_q,
            wall_time_s: opts.timing.then(|| chunk.iter().map(|(_, w)| w).sum()),
        });
    }

    if opts.axis == Axis::Devices {
        let reference = setups
            .iter()
            .zip(&points)
            .find(|(s, _)| s.federation.devices == 1)
            .and_then(|(_, p)| p.mean.hit);
        for p in &mut points {
            p.speedup = match (reference, p.mean.hit) {
                (Some(r), Some(h)) => Some(r.iterations as f64 / h.iterations as f64),
                _ => None,
            };
        }
    }

    Ok(SweepResult {
        axis: opts.axis,
        epsilon: opts.epsilon,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(t: usize, m: f64) -> IterationRecord {
        IterationRecord {
            t,
            eta: 0.1,
            grad_norm_sq: Some(m),
            lower_gap_sq: Some(0.0),
            metric_running: Some(m),
            samples: 3 * (t as u64 + 1),
            rounds: (t as u64).div_ceil(2),
            bytes_upload: 0,
            bytes_broadcast: 0,
        }
    }

    #[test]
    fn hit_is_the_first_record_at_or_below_epsilon() {
        let recs: Vec<_> = [5.0, 3.0, 1.0, 0.5, 2.0].iter().enumerate().map(|(t, &m)| record(t, m)).collect();
        let running = recs.iter().map(|r| r.metric_running);
        assert_eq!(
            first_hit(&recs, running, 1.0),
            Some(Hit {
                iterations: 3,
                samples: 9,
                rounds: 1
            })
        );
        assert_eq!(first_hit(&recs, recs.iter().map(|r| r.metric_running), 0.1), None);
        assert_eq!(first_hit(&recs, recs.iter().map(|_| None), 10.0), None);
    }

    #[test]
    fn values_map_onto_the_config() {
        let base = ExperimentConfig::default();
        assert_eq!(apply(&base, Axis::Devices, "8").unwrap().federation.devices, 8);
        assert_eq!(apply(&base, Axis::Period, "3").unwrap().federation.period, 3);
        assert_eq!(apply(&base, Axis::Terms, "5").unwrap().algorithm.terms, Some(5));
        assert_eq!(
            apply(&base, Axis::Algorithm, "bsgvrm-thm3").unwrap().algorithm.mode,
            Mode::BsgvrmThm3
        );
        assert!(apply(&base, Axis::Devices, "two").is_err());
        assert!(apply(&base, Axis::Algorithm, "sgd").is_err());
    }
}
