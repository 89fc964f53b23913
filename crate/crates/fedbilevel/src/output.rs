//! CSV writers for traces and sweeps.
//!
//! Trace CSV: header [`TRACE_COLUMNS`], one row per iteration per seed in
//! seed order, then a summary block whose lines all start with `#`:
//!
//! ```text
//! # summary
//! # seed,final_metric,max_iterate_norm,left_region,warm_start_samples,samples_per_device,rounds,bytes
//! # 0,...
//! # mean,<seed-averaged final metric>
//! ```
//!
//! Sweep CSV: header [`SWEEP_COLUMNS`]; for each swept value, one row per
//! seed followed by a `mean` row computed from the seed-averaged running
//! metric. Missing values are empty fields and an unmet threshold is
//! written as `not reached`.
//!
//! Floats use Rust's shortest round-trip formatting, so identical runs give
//! identical bytes.

use std::io::Write;

use anyhow::Result;

use fedbilevel_core::federation::accounting;

use crate::experiment::SeedTrace;
use crate::sweep::{Hit, SweepResult};

pub const TRACE_COLUMNS: [&str; 10] = [
    "seed",
    "t",
    "eta",
    "grad_norm_sq",
    "lower_gap_sq",
    "metric_running",
    "samples",
    "rounds",
    "bytes_upload",
    "bytes_broadcast",
];

pub const SUMMARY_COLUMNS: [&str; 8] = [
    "seed",
    "final_metric",
    "max_iterate_norm",
    "left_region",
    "warm_start_samples",
    "samples_per_device",
    "rounds",
    "bytes",
];

pub const SWEEP_COLUMNS: [&str; 11] = [
    "axis",
    "value",
    "seed",
    "final_metric",
    "iterations_to_eps",
    "samples_to_eps",
    "rounds_to_eps",
    "speedup",
    "bias",
    "delta_q",
    "wall_time_s",
];

pub const NOT_REACHED: &str = "not reached";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_trace<W: Write>(out: W, runs: &[SeedTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_COLUMNS)?;
    for run in runs {
        for r in &run.trace.records {
            w.write_record([
                run.seed.to_string(),
                r.t.to_string(),
                r.eta.to_string(),
                opt(r.grad_norm_sq),
                opt(r.lower_gap_sq),
                opt(r.metric_running),
                r.samples.to_string(),
                r.rounds.to_string(),
                r.bytes_upload.to_string(),
                r.bytes_broadcast.to_string(),
            ])?;
        }
    }
    let mut out = w.into_inner().map_err(|e| e.into_error())?;

    writeln!(out, "# summary")?;
    writeln!(out, "# {}", SUMMARY_COLUMNS.join(","))?;
    let mut finals = Vec::new();
    for run in runs {
        let s = &run.trace.summary;
        let acc = accounting(&run.trace);
        finals.extend(s.final_metric);
        writeln!(
            out,
            "# {},{},{},{},{},{},{},{}",
            run.seed,
            opt(s.final_metric),
            s.max_iterate_norm,
            s.left_region,
            s.warm_start_samples,
            acc.samples_per_device,
            acc.rounds,
            acc.bytes
        )?;
    }
    let mean = (finals.len() == runs.len() && !runs.is_empty())
        .then(|| finals.iter().sum::<f64>() / finals.len() as f64);
    writeln!(out, "# mean,{}", opt(mean))?;
    out.flush()?;
    Ok(())
}

fn hit_fields(hit: Option<Hit>, reachable: bool) -> [String; 3] {
    match (hit, reachable) {
        (Some(h), _) => [h.iterations.to_string(), h.samples.to_string(), h.rounds.to_string()],
        (None, true) => [NOT_REACHED.into(), NOT_REACHED.into(), NOT_REACHED.into()],
        (None, false) => Default::default(),
    }
}

pub fn write_sweep<W: Write>(out: W, result: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    let axis = result.axis.as_str();
    for point in &result.points {
        for s in &point.seeds {
            let [it, sa, ro] = hit_fields(s.hit, s.final_metric.is_some());
            w.write_record([
                axis.to_string(),
                point.value.clone(),
                s.seed.to_string(),
                opt(s.final_metric),
                it,
                sa,
                ro,
                String::new(),
                String::new(),
                point.delta_q.to_string(),
                String::new(),
            ])?;
        }
        let m = &point.mean;
        let [it, sa, ro] = hit_fields(m.hit, m.final_metric.is_some());
        w.write_record([
            axis.to_string(),
            point.value.clone(),
            "mean".to_string(),
            opt(m.final_metric),
            it,
            sa,
            ro,
            opt(point.speedup),
            opt(point.bias),
            point.delta_q.to_string(),
            opt(point.wall_time_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}
