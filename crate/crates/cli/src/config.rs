use std::path::{Path, PathBuf};

use serde::Deserialize;
use tcvolterra::bsde::DriverInput;
use tcvolterra::condexp::FeatureMap;
use tcvolterra::grid::{MarkGrid, TimeGrid};
use tcvolterra::harvest::{CandidateOptions, HarvestModel};
use tcvolterra::rng::EnsembleHandle;
use tcvolterra::timechange::RateSpec;
use tcvolterra::volterra::{Amplitude, Perturbation};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    #[serde(default = "default_rates")]
    pub rates: RateSpec,
    #[serde(default)]
    pub marks: MarksConfig,
    pub ensemble: EnsembleConfig,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub condexp: CondexpConfig,
    #[serde(default)]
    pub naderiv: NaderivConfig,
    #[serde(default)]
    pub bsde: BsdeConfig,
    #[serde(default)]
    pub mp: MpConfig,
    #[serde(default)]
    pub harvest: HarvestConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_rates() -> RateSpec {
    RateSpec::constant(1.0, 0.0)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarksConfig {
    #[serde(default)]
    pub z: Vec<f64>,
    #[serde(default)]
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `b = drift · x`, `κ = noise · x`.
    Linear { x0: f64, drift: f64, noise: f64 },
    /// `b = e^{−rate (t−s)} x`.
    ExponentialKernel { x0: f64, rate: f64 },
    /// `b = u`, `κ = vol · x`, `F = −u² − cost · x²`, `G = x`.
    Lq {
        x0: f64,
        #[serde(default)]
        vol: f64,
        #[serde(default)]
        cost: f64,
    },
    Harvest(HarvestModel),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlConfig {
    Constant { value: f64 },
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondexpConfig {
    #[serde(default = "default_degree")]
    pub degree: u32,
    #[serde(default = "default_lambda_samples")]
    pub lambda_samples: usize,
}

fn default_degree() -> u32 {
    2
}

fn default_lambda_samples() -> usize {
    8
}

impl Default for CondexpConfig {
    fn default() -> Self {
        Self { degree: default_degree(), lambda_samples: default_lambda_samples() }
    }
}

impl CondexpConfig {
    pub fn apply(&self, map: FeatureMap) -> FeatureMap {
        map.with_lambda_samples(self.lambda_samples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaTarget {
    /// `B(T)²`.
    BrownianSquared,
    /// `Λ^B_T + Λ^H_T`.
    LambdaTotal,
    /// `∫ φ dμ` with `φ = 1` on the Gaussian channel.
    Brownian,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NaderivConfig {
    #[serde(default = "default_level")]
    pub level: u32,
    #[serde(default = "default_target")]
    pub target: NaTarget,
    #[serde(default = "default_strata")]
    pub strata: usize,
}

fn default_level() -> u32 {
    2
}

fn default_target() -> NaTarget {
    NaTarget::BrownianSquared
}

fn default_strata() -> usize {
    4
}

impl Default for NaderivConfig {
    fn default() -> Self {
        Self { level: default_level(), target: default_target(), strata: default_strata() }
    }
}

/// Linear BSDE `g = a p + c`, `p(T) = scale · X(T) + shift`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeConfig {
    #[serde(default = "default_input")]
    pub driver_input: DriverInput,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub scale: f64,
    #[serde(default = "one")]
    pub shift: f64,
}

fn default_input() -> DriverInput {
    DriverInput::Smoothed
}

fn one() -> f64 {
    1.0
}

impl Default for BsdeConfig {
    fn default() -> Self {
        Self { driver_input: default_input(), a: 0.0, c: 0.0, scale: 0.0, shift: 1.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpConfig {
    #[serde(default)]
    pub u_lower: f64,
    #[serde(default = "one")]
    pub u_upper: f64,
    #[serde(default = "default_points")]
    pub u_points: usize,
    #[serde(default = "default_tol_max")]
    pub tol_max: f64,
    #[serde(default = "default_tol_conc")]
    pub tol_conc: f64,
    #[serde(default = "default_spread")]
    pub probe_spread: f64,
    #[serde(default = "default_max_paths")]
    pub max_paths: usize,
    /// Constant candidate control.
    #[serde(default = "default_candidate")]
    pub candidate: f64,
    #[serde(default = "default_start")]
    pub bump_start: f64,
    #[serde(default = "default_width")]
    pub bump_width: f64,
    #[serde(default = "one")]
    pub bump_amplitude: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_points() -> usize {
    101
}
fn default_tol_max() -> f64 {
    1e-6
}
fn default_tol_conc() -> f64 {
    1e-8
}
fn default_spread() -> f64 {
    0.5
}
fn default_max_paths() -> usize {
    2000
}
fn default_candidate() -> f64 {
    0.5
}
fn default_start() -> f64 {
    0.25
}
fn default_width() -> f64 {
    0.25
}
fn default_eps() -> f64 {
    1e-4
}

impl Default for MpConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl MpConfig {
    pub fn perturbation(&self) -> Perturbation {
        Perturbation { start: self.bump_start, width: self.bump_width, amplitude: Amplitude::Constant(self.bump_amplitude) }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarvestConfig {
    #[serde(default = "half")]
    pub damping: f64,
    #[serde(default = "default_iter")]
    pub max_iter: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_scan")]
    pub scan_points: usize,
}

fn half() -> f64 {
    0.5
}
fn default_iter() -> usize {
    50
}
fn default_rel_tol() -> f64 {
    0.02
}
fn default_scan() -> usize {
    21
}

impl Default for HarvestConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl HarvestConfig {
    pub fn options(&self, degree: u32) -> CandidateOptions {
        CandidateOptions { damping: self.damping, max_iter: self.max_iter, rel_tol: self.rel_tol, degree }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

/// A configuration problem, reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn parse(text: &str, origin: &Path) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| ConfigError(format!("{}: {e}", origin.display())))?;
    cfg.validate().map_err(|e| ConfigError(format!("{}: {e}", origin.display())))?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn time_grid(&self) -> tcvolterra::Result<TimeGrid> {
        TimeGrid::uniform(self.grid.horizon, self.grid.steps)
    }

    pub fn mark_grid(&self) -> tcvolterra::Result<MarkGrid> {
        if self.marks.z.is_empty() && self.marks.weights.is_empty() {
            Ok(MarkGrid::empty())
        } else {
            MarkGrid::new(self.marks.z.clone(), self.marks.weights.clone())
        }
    }

    pub fn handle(&self) -> tcvolterra::Result<EnsembleHandle> {
        EnsembleHandle::new(self.ensemble.paths, self.ensemble.seed)
    }

    /// Field-level checks that do not need a simulation.
    pub fn validate(&self) -> Result<(), String> {
        let grid = self.time_grid().map_err(|e| format!("grid: {e}"))?;
        self.mark_grid().map_err(|e| format!("marks: {e}"))?;
        self.rates.validate().map_err(|e| format!("rates: {e}"))?;
        self.handle().map_err(|e| format!("ensemble: {e}"))?;
        if self.condexp.degree == 0 {
            return Err("condexp.degree must be >= 1".into());
        }
        if self.naderiv.strata == 0 {
            return Err("naderiv.strata must be >= 1".into());
        }
        if !(self.mp.u_lower <= self.mp.u_upper) || self.mp.u_points == 0 {
            return Err("mp: control grid is empty".into());
        }
        if !(self.mp.eps > 0.0) {
            return Err(format!("mp.eps must be > 0, got {}", self.mp.eps));
        }
        if !(self.harvest.damping > 0.0 && self.harvest.damping <= 1.0) {
            return Err(format!("harvest.damping must lie in (0, 1], got {}", self.harvest.damping));
        }
        match &self.model {
            Some(ModelConfig::Harvest(m)) => m.validate(&grid).map_err(|e| format!("model: {e}"))?,
            Some(ModelConfig::Linear { x0, drift, noise }) => finite("model", &[*x0, *drift, *noise])?,
            Some(ModelConfig::ExponentialKernel { x0, rate }) => finite("model", &[*x0, *rate])?,
            Some(ModelConfig::Lq { x0, vol, cost }) => finite("model", &[*x0, *vol, *cost])?,
            None => {}
        }
        Ok(())
    }
}

fn finite(section: &str, values: &[f64]) -> Result<(), String> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(format!("{section}: parameters must be finite"))
    }
}
