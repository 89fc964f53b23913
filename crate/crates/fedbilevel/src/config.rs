//! Experiment configuration files.
//!
//! A config is a TOML file with four optional sections. Every key has a
//! default, so an empty file describes a complete experiment:
//!
//! ```toml
//! [problem]
//! family = "quadquad"      # or "ridge"
//! dim_x = 10
//! dim_y = 10
//! mu = 1.0                 # smallest eigenvalue of the lower-level Hessian
//! l1 = 2.0                 # largest eigenvalue of the lower-level Hessian
//! coupling = 1.0
//! lambda = 1.0             # upper-level ridge weight on x
//! offset_scale = 1.0
//! target_scale = 1.0
//! noise_std = 0.1
//! radius = 10.0            # region the smoothness constants cover
//! seed = 0                 # problem instance seed
//! csv = "data.csv"         # ridge only; synthesized data when absent
//! train_ratio = 0.7        # ridge only
//! n_train = 200            # ridge synthesis only, features = dim_x
//! n_val = 100
//! synth_noise = 0.1
//! log_reg_bound = 3.0      # ridge only, |x|_inf bound
//!
//! [federation]
//! devices = 4
//! period = 4
//! iterations = 1000
//! seeds = [0, 1, 2, 3, 4]
//! batch = 10               # first-iteration batch of LocalBSGVRM
//! bytes_per_scalar = 8
//! count_broadcast = true
//! x0 = 1.0                 # every coordinate of the starting x
//! y0 = 0.0
//! divergence_limit = 1e6
//!
//! [algorithm]
//! mode = "bsgm-thm1"       # bsgm-thm1 | bsgvrm-thm3 | bsgvrm-thm5 | bsgm | bsgvrm
//! epsilon = 1e-3           # target accuracy used to pick the Neumann depth
//! # theta, terms, alpha, beta, rho1, rho2, eta: optional overrides
//! eta_scaling = "none"     # "linear" multiplies a fixed eta by the device count
//!
//! [sweep]
//! axis = "K"               # K | p | Q | algorithm
//! values = ["1", "2", "4", "8"]
//! epsilon = 1.0            # running-metric threshold
//! bias_draws = 100
//!
//! [output]
//! path = "trace.csv"
//! ```
//!
//! The manual modes `bsgm` and `bsgvrm` default to
//! `alpha = beta = rho1 = rho2 = 1` and `eta = 0.05`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use fedbilevel_core::algorithms::{Algorithm, TheoremVariant};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub federation: FederationSpec,
    pub algorithm: AlgorithmSpec,
    pub sweep: SweepSpec,
    pub output: OutputSpec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    QuadQuad,
    Ridge,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSpec {
    pub family: Family,
    pub dim_x: usize,
    pub dim_y: usize,
    pub mu: f64,
    pub l1: f64,
    pub coupling: f64,
    pub lambda: f64,
    pub offset_scale: f64,
    pub target_scale: f64,
    pub noise_std: f64,
    pub radius: f64,
    pub seed: u64,
    pub csv: Option<PathBuf>,
    pub train_ratio: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub synth_noise: f64,
    pub log_reg_bound: f64,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            family: Family::QuadQuad,
            dim_x: 10,
            dim_y: 10,
            mu: 1.0,
            l1: 2.0,
            coupling: 1.0,
            lambda: 1.0,
            offset_scale: 1.0,
            target_scale: 1.0,
            noise_std: 0.1,
            radius: 10.0,
            seed: 0,
            csv: None,
            train_ratio: 0.7,
            n_train: 200,
            n_val: 100,
            synth_noise: 0.1,
            log_reg_bound: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSpec {
    pub devices: usize,
    pub period: usize,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub batch: usize,
    pub bytes_per_scalar: u64,
    pub count_broadcast: bool,
    pub x0: f64,
    pub y0: f64,
    pub divergence_limit: f64,
}

impl Default for FederationSpec {
    fn default() -> Self {
        Self {
            devices: 4,
            period: 4,
            iterations: 1000,
            seeds: vec![0, 1, 2, 3, 4],
            batch: 10,
            bytes_per_scalar: 8,
            count_broadcast: true,
            x0: 1.0,
            y0: 0.0,
            divergence_limit: 1e6,
        }
    }
}

/// Which algorithm runs and where its hyperparameters come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "bsgm-thm1")]
    BsgmThm1,
    #[serde(rename = "bsgvrm-thm3")]
    BsgvrmThm3,
    #[serde(rename = "bsgvrm-thm5")]
    BsgvrmThm5,
    #[serde(rename = "bsgm")]
    BsgmManual,
    #[serde(rename = "bsgvrm")]
    BsgvrmManual,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::BsgmThm1,
        Mode::BsgvrmThm3,
        Mode::BsgvrmThm5,
        Mode::BsgmManual,
        Mode::BsgvrmManual,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::BsgmThm1 => "bsgm-thm1",
            Mode::BsgvrmThm3 => "bsgvrm-thm3",
            Mode::BsgvrmThm5 => "bsgvrm-thm5",
            Mode::BsgmManual => "bsgm",
            Mode::BsgvrmManual => "bsgvrm",
        }
    }

    pub fn variant(&self) -> Option<TheoremVariant> {
        match self {
            Mode::BsgmThm1 => Some(TheoremVariant::BsgmFixed),
            Mode::BsgvrmThm3 => Some(TheoremVariant::BsgvrmFixed),
            Mode::BsgvrmThm5 => Some(TheoremVariant::BsgvrmDecaying),
            Mode::BsgmManual | Mode::BsgvrmManual => None,
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            Mode::BsgmThm1 | Mode::BsgmManual => Algorithm::LocalBsgm,
            Mode::BsgvrmThm3 | Mode::BsgvrmThm5 | Mode::BsgvrmManual => Algorithm::LocalBsgvrm,
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaScaling {
    #[default]
    None,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub mode: Mode,
    pub epsilon: f64,
    pub theta: Option<f64>,
    pub terms: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub rho1: Option<f64>,
    pub rho2: Option<f64>,
    pub eta: Option<f64>,
    pub eta_scaling: EtaScaling,
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        Self {
            mode: Mode::BsgmThm1,
            epsilon: 1e-3,
            theta: None,
            terms: None,
            alpha: None,
            beta: None,
            rho1: None,
            rho2: None,
            eta: None,
            eta_scaling: EtaScaling::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
pub enum Axis {
    #[serde(rename = "K")]
    Devices,
    #[serde(rename = "p")]
    Period,
    #[serde(rename = "Q")]
    Terms,
    #[serde(rename = "algorithm")]
    Algorithm,
}

impl Axis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::Devices => "K",
            Axis::Period => "p",
            Axis::Terms => "Q",
            Axis::Algorithm => "algorithm",
        }
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "K" => Ok(Axis::Devices),
            "p" => Ok(Axis::Period),
            "Q" => Ok(Axis::Terms),
            "algorithm" => Ok(Axis::Algorithm),
            _ => Err(format!("unknown sweep axis `{s}` (expected K, p, Q or algorithm)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Option<Axis>,
    pub values: Vec<String>,
    pub epsilon: Option<f64>,
    pub bias_draws: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            axis: None,
            values: Vec::new(),
            epsilon: None,
            bias_draws: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = text.parse()?;
        // relative data paths are relative to the config file
        if let (Some(csv), Some(dir)) = (cfg.problem.csv.as_mut(), path.parent()) {
            if csv.is_relative() {
                *csv = dir.join(&*csv);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.problem;
        let positive = |field, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        };
        let at_least_one = |field, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(invalid(field, "must be at least 1"))
            }
        };
        at_least_one("problem.dim_x", p.dim_x)?;
        if p.family == Family::QuadQuad {
            at_least_one("problem.dim_y", p.dim_y)?;
        }
        positive("problem.mu", p.mu)?;
        positive("problem.l1", p.l1)?;
        if p.l1 < p.mu {
            return Err(invalid("problem.l1", "must be at least mu"));
        }
        positive("problem.lambda", p.lambda)?;
        positive("problem.radius", p.radius)?;
        if !(p.noise_std >= 0.0 && p.noise_std.is_finite()) {
            return Err(invalid("problem.noise_std", "must be finite and non-negative"));
        }
        if !(p.train_ratio > 0.0 && p.train_ratio < 1.0) {
            return Err(invalid("problem.train_ratio", "must lie strictly between 0 and 1"));
        }
        at_least_one("problem.n_train", p.n_train)?;
        at_least_one("problem.n_val", p.n_val)?;
        if !(p.synth_noise >= 0.0 && p.synth_noise.is_finite()) {
            return Err(invalid("problem.synth_noise", "must be finite and non-negative"));
        }
        if !(p.log_reg_bound >= 0.0 && p.log_reg_bound.is_finite()) {
            return Err(invalid("problem.log_reg_bound", "must be finite and non-negative"));
        }

        let f = &self.federation;
        at_least_one("federation.devices", f.devices)?;
        at_least_one("federation.period", f.period)?;
        at_least_one("federation.iterations", f.iterations)?;
        at_least_one("federation.batch", f.batch)?;
        if f.seeds.is_empty() {
            return Err(invalid("federation.seeds", "must list at least one seed"));
        }
        if f.bytes_per_scalar == 0 {
            return Err(invalid("federation.bytes_per_scalar", "must be at least 1"));
        }
        if !(f.x0.is_finite() && f.y0.is_finite()) {
            return Err(invalid("federation.x0", "starting point must be finite"));
        }
        positive("federation.divergence_limit", f.divergence_limit)?;

        let a = &self.algorithm;
        positive("algorithm.epsilon", a.epsilon)?;
        let overrides = [
            ("algorithm.theta", a.theta),
            ("algorithm.alpha", a.alpha),
            ("algorithm.beta", a.beta),
            ("algorithm.rho1", a.rho1),
            ("algorithm.rho2", a.rho2),
            ("algorithm.eta", a.eta),
        ];
        for (field, v) in overrides {
            if let Some(v) = v {
                positive(field, v)?;
            }
        }

        if let Some(eps) = self.sweep.epsilon {
            positive("sweep.epsilon", eps)?;
        }
        at_least_one("sweep.bias_draws", self.sweep.bias_draws)?;
        Ok(())
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(toml::from_str(s)?)
    }
}

/// Parses `"0,1,2"` or a range `"0..5"` into a seed list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|e| format!("bad seed range `{s}`: {e}"))?;
        let hi: u64 = hi.trim().parse().map_err(|e| format!("bad seed range `{s}`: {e}"))?;
        if hi <= lo {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok((lo..hi).collect());
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|e| format!("bad seed `{v}`: {e}")))
        .collect()
}
