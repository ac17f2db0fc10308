//! Experiment configuration: a strict TOML document with one section per
//! subsystem. Unknown keys are rejected so configs stay reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use otk_core::integrate::{IntegratorKind, InterpScheme};
use otk_core::solve::{AlphaSchedule, BoundMode, Method, SolverConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub environment: Option<EnvironmentSection>,
    #[serde(default)]
    pub transcribe: Option<TranscribeSection>,
    #[serde(default)]
    pub solve: Option<SolveSection>,
    #[serde(default)]
    pub fbsm: Option<FbsmSection>,
    #[serde(default)]
    pub sysid: Option<SysidSection>,
    #[serde(default)]
    pub e2e: Option<E2eSection>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Plan,
    Sysid,
    E2e,
    Fbsm,
    IntegratorStudy,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Plan => "plan",
            ExperimentKind::Sysid => "sysid",
            ExperimentKind::E2e => "e2e",
            ExperimentKind::Fbsm => "fbsm",
            ExperimentKind::IntegratorStudy => "integrator-study",
        }
    }

    /// Experiments that draw random numbers must be seeded.
    pub fn is_stochastic(self) -> bool {
        matches!(self, ExperimentKind::Sysid | ExperimentKind::E2e)
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    pub name: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TranscribeSection {
    pub method: TranscribeMethod,
    #[serde(default = "default_n_controls")]
    pub n_controls: usize,
    #[serde(default = "default_one")]
    pub n_intervals: usize,
    #[serde(default = "default_one")]
    pub steps_per_interval: usize,
    #[serde(default)]
    pub integrator: IntegratorName,
    #[serde(default)]
    pub interpolation: InterpolationName,
    #[serde(default = "default_n_segments")]
    pub n_segments: usize,
    #[serde(default)]
    pub enforce_state_bounds: bool,
}

fn default_n_controls() -> usize {
    21
}
fn default_one() -> usize {
    1
}
fn default_n_segments() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranscribeMethod {
    SingleShooting,
    MultipleShooting,
    Trapezoidal,
    HermiteSimpson,
}

impl TranscribeMethod {
    #[allow(dead_code)]
    pub fn name(self) -> &'static str {
        match self {
            TranscribeMethod::SingleShooting => "single-shooting",
            TranscribeMethod::MultipleShooting => "multiple-shooting",
            TranscribeMethod::Trapezoidal => "trapezoidal-collocation",
            TranscribeMethod::HermiteSimpson => "hermite-simpson-collocation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorName {
    Euler,
    Heun,
    Midpoint,
    #[default]
    Rk4,
}

impl From<IntegratorName> for IntegratorKind {
    fn from(v: IntegratorName) -> Self {
        match v {
            IntegratorName::Euler => IntegratorKind::Euler,
            IntegratorName::Heun => IntegratorKind::Heun,
            IntegratorName::Midpoint => IntegratorKind::Midpoint,
            IntegratorName::Rk4 => IntegratorKind::Rk4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InterpolationName {
    #[default]
    Default,
    PiecewiseConstant,
    PiecewiseLinear,
}

impl InterpolationName {
    pub fn resolve(self) -> Option<InterpScheme> {
        match self {
            InterpolationName::Default => None,
            InterpolationName::PiecewiseConstant => Some(InterpScheme::PiecewiseConstant),
            InterpolationName::PiecewiseLinear => Some(InterpScheme::PiecewiseLinear),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    #[serde(default)]
    pub method: MethodName,
    #[serde(default = "default_eta")]
    pub eta_y: f64,
    #[serde(default = "default_eta")]
    pub eta_lambda: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol_grad: f64,
    #[serde(default = "default_tol")]
    pub tol_constraint: f64,
    #[serde(default)]
    pub bound_mode: BoundModeName,
    #[serde(default = "default_one_f")]
    pub alpha: f64,
    #[serde(default = "default_one_f")]
    pub alpha_decay: f64,
    #[serde(default = "default_one_f")]
    pub objective_scale: f64,
    #[serde(default)]
    pub equilibrate: bool,
    #[serde(default = "default_one_f")]
    pub eta_decay: f64,
    #[serde(default = "default_ceiling")]
    pub divergence_ceiling: f64,
    #[serde(default)]
    pub snapshot_stride: usize,
}

fn default_eta() -> f64 {
    1e-2
}
fn default_max_iters() -> usize {
    10_000
}
fn default_tol() -> f64 {
    1e-6
}
fn default_one_f() -> f64 {
    1.0
}
fn default_ceiling() -> f64 {
    1e8
}

impl Default for SolveSection {
    fn default() -> Self {
        toml::from_str("").expect("empty solve section has defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Gda,
    #[default]
    Extragradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BoundModeName {
    #[default]
    Projection,
    Reparametrization,
}

impl SolveSection {
    pub fn to_solver_config(&self) -> SolverConfig {
        SolverConfig {
            eta_y: self.eta_y,
            eta_lambda: self.eta_lambda,
            max_iters: self.max_iters,
            tol_grad: self.tol_grad,
            tol_constraint: self.tol_constraint,
            method: match self.method {
                MethodName::Gda => Method::Gda,
                MethodName::Extragradient => Method::Extragradient,
            },
            bound_mode: match self.bound_mode {
                BoundModeName::Projection => BoundMode::Projection,
                BoundModeName::Reparametrization => BoundMode::Reparametrization,
            },
            alpha: AlphaSchedule {
                initial: self.alpha,
                decay: self.alpha_decay,
            },
            objective_scale: self.objective_scale,
            equilibrate: self.equilibrate,
            eta_decay: self.eta_decay,
            divergence_ceiling: self.divergence_ceiling,
            snapshot_stride: self.snapshot_stride,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FbsmSection {
    #[serde(default = "default_fbsm_steps")]
    pub n_steps: usize,
    #[serde(default = "default_fbsm_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "default_fbsm_tol")]
    pub tol: f64,
    #[serde(default = "default_relaxation")]
    pub relaxation: f64,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_inner_step_size")]
    pub inner_step_size: f64,
}

fn default_fbsm_steps() -> usize {
    100
}
fn default_fbsm_sweeps() -> usize {
    300
}
fn default_fbsm_tol() -> f64 {
    1e-8
}
fn default_relaxation() -> f64 {
    0.5
}
fn default_inner_steps() -> usize {
    40
}
fn default_inner_step_size() -> f64 {
    0.2
}

impl Default for FbsmSection {
    fn default() -> Self {
        toml::from_str("").expect("empty fbsm section has defaults")
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SysidSection {
    #[serde(default)]
    pub strategy: StrategyName,
    #[serde(default = "default_walk_sigma")]
    pub walk_sigma: f64,
    #[serde(default = "default_n_episodes")]
    pub n_episodes: usize,
    #[serde(default = "default_sysid_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_train_steps")]
    pub train_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Per-state-dimension vector-field report axes.
    #[serde(default)]
    pub vf_state_min: Vec<f64>,
    #[serde(default)]
    pub vf_state_max: Vec<f64>,
    #[serde(default)]
    pub vf_state_count: Vec<usize>,
    #[serde(default)]
    pub vf_control_levels: Vec<Vec<f64>>,
}

fn default_walk_sigma() -> f64 {
    0.2
}
fn default_n_episodes() -> usize {
    20
}
fn default_sysid_steps() -> usize {
    20
}
fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_train_steps() -> usize {
    1000
}
fn default_batch() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    UniformRandom,
    #[default]
    GaussianRandomWalk,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct E2eSection {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_e2e_controls")]
    pub n_controls: usize,
    #[serde(default = "default_one")]
    pub steps_per_interval: usize,
    #[serde(default = "default_k_steps")]
    pub k_steps: usize,
    #[serde(default = "default_reset_period")]
    pub reset_period: usize,
    #[serde(default = "default_outer_iters")]
    pub outer_iters: usize,
    #[serde(default = "default_outer_lr")]
    pub outer_lr: f64,
    #[serde(default = "default_one_f")]
    pub outer_lr_decay: f64,
    #[serde(default = "default_momentum")]
    pub outer_momentum: f64,
    #[serde(default)]
    pub outer_optimizer: OptimizerName,
    #[serde(default = "default_inner_eta")]
    pub eta_y: f64,
    #[serde(default = "default_inner_eta")]
    pub eta_lambda: f64,
    #[serde(default = "default_snapshot_stride")]
    pub snapshot_stride: usize,
    /// Iteration budget for the plan-on-truth expert solve.
    #[serde(default = "default_expert_iters")]
    pub expert_max_iters: usize,
}

fn default_e2e_controls() -> usize {
    6
}
fn default_k_steps() -> usize {
    10
}
fn default_reset_period() -> usize {
    50
}
fn default_outer_iters() -> usize {
    200
}
fn default_outer_lr() -> f64 {
    0.02
}
fn default_inner_eta() -> f64 {
    0.1
}
fn default_snapshot_stride() -> usize {
    10
}
fn default_expert_iters() -> usize {
    30_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Momentum,
    #[default]
    Adam,
}

impl Config {
    pub fn load(path: &Path) -> Result<(Config, String)> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("{}: cannot read config", path.display()))?;
        let cfg: Config = toml::from_str(&text)
            .with_context(|| format!("{}: invalid config", path.display()))?;
        cfg.validate()
            .with_context(|| format!("{}: invalid config", path.display()))?;
        Ok((cfg, text))
    }

    /// Semantic checks beyond the schema: names exist in their catalogs,
    /// required sections are present, stochastic experiments are seeded.
    pub fn validate(&self) -> Result<()> {
        let kind = self.experiment.kind;
        if kind.is_stochastic() && self.experiment.seed.is_none() {
            bail!("experiment.seed: required for stochastic experiment `{}`", kind.name());
        }
        match kind {
            ExperimentKind::IntegratorStudy => {}
            _ => {
                let env = self
                    .environment
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("environment: section required for `{}`", kind.name()))?;
                if !otk_core::systems::ENV_NAMES.contains(&env.name.as_str()) {
                    bail!("environment.name: unknown environment `{}`", env.name);
                }
            }
        }
        if kind == ExperimentKind::Plan && self.transcribe.is_none() {
            bail!("transcribe: section required for `plan`");
        }
        if let Some(t) = &self.transcribe {
            if t.n_controls < 2 {
                bail!("transcribe.n_controls: must be at least 2");
            }
            if t.n_segments == 0 {
                bail!("transcribe.n_segments: must be at least 1");
            }
        }
        if let Some(s) = &self.sysid {
            if s.vf_state_min.len() != s.vf_state_max.len()
                || s.vf_state_min.len() != s.vf_state_count.len()
            {
                bail!("sysid.vf_state_*: axis arrays must have equal lengths");
            }
        }
        Ok(())
    }
}
