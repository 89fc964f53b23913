//! Turns a parsed config into a problem instance and per-seed runs.

use anyhow::{Context, Result};

use fedbilevel_core::algorithms::{theorem_hyperparams, HyperParams, StepSchedule};
use fedbilevel_core::federation::{run_with, FederationConfig, RunTrace, Sequential};
use fedbilevel_core::hypergrad::{derived_constants, DerivedConstants, NeumannConfig};
use fedbilevel_core::problems::{
    BilevelOracle, QuadQuad, QuadQuadParams, RidgeData, RidgeHyper, SmoothnessConstants,
};
use fedbilevel_core::Vector;

use crate::config::{EtaScaling, ExperimentConfig, Family, ProblemSpec};
use crate::data::load_ridge_csv;
use crate::executor::{Parallel, Workers};

/// Default hyperparameters of the manual modes.
pub const MANUAL_WEIGHT: f64 = 1.0;
pub const MANUAL_ETA: f64 = 0.05;

#[derive(Clone, Debug)]
pub enum Problem {
    QuadQuad(QuadQuad),
    Ridge(RidgeHyper),
}

impl Problem {
    /// `fault` flips the sign of the mixed second-derivative term.
    pub fn build(spec: &ProblemSpec, fault: bool) -> Result<Self> {
        let problem = match spec.family {
            Family::QuadQuad => {
                let q = QuadQuad::generate(&QuadQuadParams {
                    dim_x: spec.dim_x,
                    dim_y: spec.dim_y,
                    mu: spec.mu,
                    l1: spec.l1,
                    coupling: spec.coupling,
                    lambda: spec.lambda,
                    offset_scale: spec.offset_scale,
                    target_scale: spec.target_scale,
                    noise_std: spec.noise_std,
                    radius: spec.radius,
                    seed: spec.seed,
                })
                .context("building quadquad problem")?;
                Problem::QuadQuad(if fault { q.with_flipped_mixed_term() } else { q })
            }
            Family::Ridge => {
                let data = match &spec.csv {
                    Some(path) => load_ridge_csv(path, spec.train_ratio, spec.seed)?,
                    None => RidgeData::synthesize(spec.n_train, spec.n_val, spec.dim_x, spec.synth_noise, spec.seed)
                        .context("synthesizing ridge data")?,
                };
                let r = RidgeHyper::new(data, spec.log_reg_bound, spec.radius).context("building ridge problem")?;
                Problem::Ridge(if fault { r.with_flipped_mixed_term() } else { r })
            }
        };
        Ok(problem)
    }

    pub fn oracle(&self) -> &dyn BilevelOracle {
        match self {
            Problem::QuadQuad(q) => q,
            Problem::Ridge(r) => r,
        }
    }
}

/// Everything a run needs besides its seed.
#[derive(Clone, Debug)]
pub struct Setup {
    pub smoothness: SmoothnessConstants,
    pub neumann: NeumannConfig,
    pub consts: DerivedConstants,
    /// Template with `seed = 0`.
    pub federation: FederationConfig,
}

pub fn neumann_for(cfg: &ExperimentConfig, sc: &SmoothnessConstants) -> Result<NeumannConfig> {
    let a = &cfg.algorithm;
    let base = NeumannConfig::for_target(sc, a.epsilon).context("algorithm.epsilon")?;
    let neumann = NeumannConfig::new(a.theta.unwrap_or(base.theta()), a.terms.unwrap_or(base.terms()))
        .context("algorithm.theta")?;
    neumann.check_against(sc).context("algorithm.theta")?;
    Ok(neumann)
}

pub fn setup(cfg: &ExperimentConfig, problem: &Problem) -> Result<Setup> {
    cfg.validate()?;
    let oracle = problem.oracle();
    let sc = oracle.smoothness();
    let neumann = neumann_for(cfg, &sc)?;
    let consts = derived_constants(&sc, &neumann);
    let fed = &cfg.federation;
    let a = &cfg.algorithm;

    let (mut hp, mut schedule) = match a.mode.variant() {
        Some(variant) => theorem_hyperparams(&consts, &sc, neumann, fed.devices, fed.period, variant, fed.batch)
            .context("deriving theorem hyperparameters")?,
        None => (
            HyperParams {
                alpha: MANUAL_WEIGHT,
                beta: MANUAL_WEIGHT,
                rho1: MANUAL_WEIGHT,
                rho2: MANUAL_WEIGHT,
                batch: fed.batch,
                neumann,
            },
            StepSchedule::Fixed { eta: MANUAL_ETA },
        ),
    };
    if let Some(v) = a.alpha {
        hp.alpha = v;
    }
    if let Some(v) = a.beta {
        hp.beta = v;
    }
    if let Some(v) = a.rho1 {
        hp.rho1 = v;
    }
    if let Some(v) = a.rho2 {
        hp.rho2 = v;
    }
    if let Some(eta) = a.eta {
        schedule = StepSchedule::Fixed { eta };
    }
    if let (EtaScaling::Linear, StepSchedule::Fixed { eta }) = (a.eta_scaling, schedule) {
        schedule = StepSchedule::Fixed {
            eta: eta * fed.devices as f64,
        };
    }

    let dims = oracle.dims();
    let mut federation = FederationConfig::new(
        a.mode.algorithm(),
        hp,
        schedule,
        Vector::from_element(dims.x, fed.x0),
        Vector::from_element(dims.y, fed.y0),
    );
    federation.devices = fed.devices;
    federation.period = fed.period;
    federation.iterations = fed.iterations;
    federation.metric_weight = consts.l_tilde;
    federation.bytes_per_scalar = fed.bytes_per_scalar;
    federation.count_broadcast = fed.count_broadcast;
    federation.divergence_limit = fed.divergence_limit;
    federation.validate(oracle).context("federation")?;
    Ok(Setup {
        smoothness: sc,
        neumann,
        consts,
        federation,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedTrace {
    pub seed: u64,
    pub trace: RunTrace,
}

/// One run per seed, in seed order.
pub fn run_seeds(setup: &Setup, problem: &Problem, seeds: &[u64], workers: &Workers) -> Result<Vec<SeedTrace>> {
    let parallel_devices = workers.count() > 1 && seeds.len() < workers.count();
    let results = workers.map(seeds, |&seed| {
        let mut fed = setup.federation.clone();
        fed.seed = seed;
        let trace = if parallel_devices {
            run_with(&fed, problem.oracle(), &Parallel)
        } else {
            run_with(&fed, problem.oracle(), &Sequential)
        };
        trace
            .map(|trace| SeedTrace { seed, trace })
            .with_context(|| format!("run with seed {seed}"))
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;
    use fedbilevel_core::algorithms::Algorithm;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.problem.dim_x = 3;
        cfg.problem.dim_y = 3;
        cfg.federation.iterations = 20;
        cfg.federation.devices = 2;
        cfg.federation.period = 2;
        cfg
    }

    #[test]
    fn manual_mode_defaults_and_linear_eta() {
        let mut cfg = small();
        cfg.algorithm.mode = Mode::BsgvrmManual;
        cfg.algorithm.eta_scaling = EtaScaling::Linear;
        cfg.federation.devices = 3;
        let problem = Problem::build(&cfg.problem, false).unwrap();
        let s = setup(&cfg, &problem).unwrap();
        assert_eq!(s.federation.algorithm, Algorithm::LocalBsgvrm);
        assert_eq!(s.federation.hp.alpha, MANUAL_WEIGHT);
        assert_eq!(s.federation.schedule, StepSchedule::Fixed { eta: 3.0 * MANUAL_ETA });
        assert_eq!(s.federation.metric_weight, s.consts.l_tilde);
    }

    #[test]
    fn overrides_replace_theorem_values() {
        let mut cfg = small();
        cfg.algorithm.rho2 = Some(0.5);
        cfg.algorithm.eta = Some(0.01);
        cfg.algorithm.terms = Some(4);
        let problem = Problem::build(&cfg.problem, false).unwrap();
        let s = setup(&cfg, &problem).unwrap();
        assert_eq!(s.federation.hp.rho2, 0.5);
        assert_eq!(s.federation.hp.neumann.terms(), 4);
        assert_eq!(s.federation.schedule, StepSchedule::Fixed { eta: 0.01 });
    }

    #[test]
    fn theta_at_the_contraction_limit_is_rejected() {
        let mut cfg = small();
        let problem = Problem::build(&cfg.problem, false).unwrap();
        cfg.algorithm.theta = Some(1.0 / problem.oracle().smoothness().l1);
        let err = setup(&cfg, &problem).unwrap_err();
        assert!(format!("{err:#}").contains("algorithm.theta"), "{err:#}");
    }

    #[test]
    fn seeds_are_independent_of_worker_count() {
        let cfg = small();
        let problem = Problem::build(&cfg.problem, false).unwrap();
        let s = setup(&cfg, &problem).unwrap();
        let one = run_seeds(&s, &problem, &[0, 1, 2], &Workers::new(1).unwrap()).unwrap();
        let four = run_seeds(&s, &problem, &[0, 1, 2], &Workers::new(4).unwrap()).unwrap();
        let single = run_seeds(&s, &problem, &[1], &Workers::new(4).unwrap()).unwrap();
        assert_eq!(one, four);
        assert_eq!(one[1], single[0]);
        assert_ne!(one[0].trace, one[1].trace);
    }

    #[test]
    fn ridge_family_runs() {
        let mut cfg = small();
        cfg.problem.family = Family::Ridge;
        cfg.problem.n_train = 30;
        cfg.problem.n_val = 10;
        let problem = Problem::build(&cfg.problem, false).unwrap();
        let s = setup(&cfg, &problem).unwrap();
        let out = run_seeds(&s, &problem, &[0], &Workers::new(1).unwrap()).unwrap();
        assert!(out[0].trace.summary.final_metric.unwrap().is_finite());
    }
}
