//! Control environments: dynamics, cost, horizon, boundary conditions, and
//! bounds, plus the built-in environment catalog.
//!
//! A [`ControlSystem`] fixes the continuous-time problem
//!
//! ```text
//!     minimize   ∫ c(x(t), u(t), t) dt  (+ terminal cost)
//!     such that  ẋ(t) = f(x(t), u(t)),   x(t_s) = x_s,
//! ```
//!
//! optionally with per-coordinate terminal pins and box bounds on states and
//! controls. Dynamics are time-independent; the instantaneous cost may depend
//! on time. Both are recorded on an [`ad::Tape`](crate::ad::Tape) so every
//! consumer (integration, transcription, the solvers) differentiates through
//! them.
//!
//! # Catalog
//!
//! | name | D | M | fixed terminal | terminal cost |
//! |------|---|---|----------------|---------------|
//! | `van-der-pol` | 2 | 1 | yes | no |
//! | `pendulum` | 2 | 1 | yes | no |
//! | `cart-pole-swing-up` | 4 | 1 | yes | no |
//! | `mountain-car` | 2 | 1 | yes | no |
//! | `cancer-treatment` | 1 | 1 | no | no |
//! | `mould-fungicide` | 1 | 1 | no | no |
//! | `predator-prey` | 2 | 1 | no | yes |
//! | `projectile` | 2 | 0 | yes (altitude) | no |
//!
//! All constants are documented per constructor below and can be overridden
//! through [`make_system`]'s parameter map.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use thiserror::Error;

use crate::ad::{Tape, Var};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error("unknown environment `{0}`")]
    UnknownEnvironment(String),
    #[error("unknown parameter `{key}` for environment `{env}`")]
    UnknownParameter { env: String, key: String },
    #[error("invalid horizon: t_start {t_start} must be < t_final {t_final}")]
    InvalidHorizon { t_start: f64, t_final: f64 },
    #[error("bound is inverted in dimension {dim}: lower {lower} > upper {upper}")]
    InvertedBound { dim: usize, lower: f64, upper: f64 },
    #[error("start state violates state bounds in dimension {dim}")]
    StartOutOfBounds { dim: usize },
    #[error("dimension mismatch: {0}")]
    Shape(&'static str),
}

/// Time-independent vector field `f(x, u)`.
pub trait Dynamics: Send + Sync {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>>;
}

/// Instantaneous cost `c(x, u, t)`.
pub trait StageCost: Send + Sync {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>], t: f64) -> Var<'t>;
}

/// Terminal cost on the final state.
pub trait TerminalCost: Send + Sync {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>]) -> Var<'t>;
}

impl<F> Dynamics for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[Var<'t>]) -> Vec<Var<'t>> + Send + Sync,
{
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
        self(tape, x, u)
    }
}

impl<F> StageCost for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[Var<'t>], f64) -> Var<'t> + Send + Sync,
{
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>], t: f64) -> Var<'t> {
        self(tape, x, u, t)
    }
}

impl<F> TerminalCost for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + Send + Sync,
{
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>]) -> Var<'t> {
        self(tape, x)
    }
}

/// A finite-horizon control environment. Immutable once built; cheap to
/// share (`Arc`-backed function objects).
#[derive(Clone)]
pub struct ControlSystem {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    pub dynamics: Arc<dyn Dynamics>,
    pub cost: Arc<dyn StageCost>,
    pub terminal_cost: Option<Arc<dyn TerminalCost>>,
    pub t_start: f64,
    pub t_final: f64,
    pub x_start: Vec<f64>,
    /// Start-state coordinates that are free decision parameters rather than
    /// fixed data (the projectile's launch velocity). Usually empty.
    pub free_start: Vec<usize>,
    /// Per-coordinate terminal pins; `None` entries are unconstrained.
    pub x_final: Option<Vec<Option<f64>>>,
    pub state_bounds: Option<Vec<(f64, f64)>>,
    pub control_bounds: Option<Vec<(f64, f64)>>,
}

impl ControlSystem {
    pub fn new(
        name: &str,
        state_dim: usize,
        control_dim: usize,
        dynamics: Arc<dyn Dynamics>,
        cost: Arc<dyn StageCost>,
        t_span: (f64, f64),
        x_start: Vec<f64>,
    ) -> Result<Self, SystemError> {
        if t_span.0 >= t_span.1 {
            return Err(SystemError::InvalidHorizon {
                t_start: t_span.0,
                t_final: t_span.1,
            });
        }
        if x_start.len() != state_dim {
            return Err(SystemError::Shape("x_start length must equal state_dim"));
        }
        Ok(ControlSystem {
            name: name.to_owned(),
            state_dim,
            control_dim,
            dynamics,
            cost,
            terminal_cost: None,
            t_start: t_span.0,
            t_final: t_span.1,
            x_start,
            free_start: Vec::new(),
            x_final: None,
            state_bounds: None,
            control_bounds: None,
        })
    }

    pub fn with_terminal_cost(mut self, tc: Arc<dyn TerminalCost>) -> Self {
        self.terminal_cost = Some(tc);
        self
    }

    /// Pin the full terminal state.
    pub fn with_x_final(self, xf: Vec<f64>) -> Result<Self, SystemError> {
        let pins = xf.into_iter().map(Some).collect();
        self.with_x_final_partial(pins)
    }

    /// Pin selected terminal coordinates.
    pub fn with_x_final_partial(mut self, xf: Vec<Option<f64>>) -> Result<Self, SystemError> {
        if xf.len() != self.state_dim {
            return Err(SystemError::Shape("x_final length must equal state_dim"));
        }
        self.x_final = Some(xf);
        Ok(self)
    }

    pub fn with_state_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self, SystemError> {
        if bounds.len() != self.state_dim {
            return Err(SystemError::Shape("state_bounds length must equal state_dim"));
        }
        for (dim, &(lo, hi)) in bounds.iter().enumerate() {
            if lo > hi {
                return Err(SystemError::InvertedBound {
                    dim,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        for (dim, &x) in self.x_start.iter().enumerate() {
            let (lo, hi) = bounds[dim];
            if x < lo || x > hi {
                return Err(SystemError::StartOutOfBounds { dim });
            }
        }
        self.state_bounds = Some(bounds);
        Ok(self)
    }

    pub fn with_control_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self, SystemError> {
        if bounds.len() != self.control_dim {
            return Err(SystemError::Shape("control_bounds length must equal control_dim"));
        }
        for (dim, &(lo, hi)) in bounds.iter().enumerate() {
            if lo > hi {
                return Err(SystemError::InvertedBound {
                    dim,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        self.control_bounds = Some(bounds);
        Ok(self)
    }

    pub fn with_free_start(mut self, mut coords: Vec<usize>) -> Result<Self, SystemError> {
        if coords.iter().any(|&c| c >= self.state_dim) {
            return Err(SystemError::Shape("free_start coordinate out of range"));
        }
        coords.sort_unstable();
        coords.dedup();
        self.free_start = coords;
        Ok(self)
    }

    /// True if any terminal coordinate is pinned.
    pub fn has_fixed_terminal(&self) -> bool {
        self.x_final
            .as_ref()
            .is_some_and(|xf| xf.iter().any(|c| c.is_some()))
    }

    /// Evaluate the dynamics at plain numeric state/control.
    pub fn dynamics_value(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let tape = Tape::new();
        let xv = tape.vars(x);
        let uv = tape.vars(u);
        self.dynamics
            .eval(&tape, &xv, &uv)
            .into_iter()
            .map(|v| v.value())
            .collect()
    }

    /// Evaluate the stage cost at plain numeric state/control.
    pub fn cost_value(&self, x: &[f64], u: &[f64], t: f64) -> f64 {
        let tape = Tape::new();
        let xv = tape.vars(x);
        let uv = tape.vars(u);
        self.cost.eval(&tape, &xv, &uv, t).value()
    }
}

/// The system dynamics augmented with the instantaneous cost: the extra
/// final coordinate integrates `c`, so a rollout's last component is the
/// accumulated cost (started at zero).
#[derive(Clone)]
pub struct AugmentedDynamics {
    pub state_dim: usize,
    dynamics: Arc<dyn Dynamics>,
    cost: Arc<dyn StageCost>,
}

impl AugmentedDynamics {
    /// Output dimension (`state_dim + 1`).
    pub fn dim(&self) -> usize {
        self.state_dim + 1
    }

    /// `x_aug` carries the running cost as its last entry; the first
    /// `state_dim` outputs are exactly the system dynamics.
    pub fn eval<'t>(
        &self,
        tape: &'t Tape,
        x_aug: &[Var<'t>],
        u: &[Var<'t>],
        t: f64,
    ) -> Vec<Var<'t>> {
        let x = &x_aug[..self.state_dim];
        let mut out = self.dynamics.eval(tape, x, u);
        out.push(self.cost.eval(tape, x, u, t));
        out
    }
}

/// Adjoin the running cost to the state derivative.
pub fn augment_dynamics(sys: &ControlSystem) -> AugmentedDynamics {
    AugmentedDynamics {
        state_dim: sys.state_dim,
        dynamics: Arc::clone(&sys.dynamics),
        cost: Arc::clone(&sys.cost),
    }
}

/// A time grid with states and controls sampled on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `(N+1) x D`
    pub states: Mat,
    /// `(N+1) x M`
    pub controls: Mat,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Mat, controls: Mat) -> Result<Self, SystemError> {
        if states.rows() != times.len() || controls.rows() != times.len() {
            return Err(SystemError::Shape("row counts must equal the grid length"));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SystemError::Shape("times must be strictly increasing"));
        }
        Ok(Trajectory {
            times,
            states,
            controls,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.row(self.states.rows() - 1)
    }
}

// ---------------------------------------------------------------------------
// Reusable cost shapes.
// ---------------------------------------------------------------------------

/// `sum_i wx_i x_i^2 + sum_j wu_j u_j^2`
pub struct QuadraticCost {
    pub x_weights: Vec<f64>,
    pub u_weights: Vec<f64>,
}

impl StageCost for QuadraticCost {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>], _t: f64) -> Var<'t> {
        let mut acc = tape.constant(0.0);
        for (v, &w) in x.iter().zip(&self.x_weights) {
            if w != 0.0 {
                acc = acc + *v * *v * w;
            }
        }
        for (v, &w) in u.iter().zip(&self.u_weights) {
            if w != 0.0 {
                acc = acc + *v * *v * w;
            }
        }
        acc
    }
}

pub struct ZeroCost;

impl StageCost for ZeroCost {
    fn eval<'t>(&self, tape: &'t Tape, _x: &[Var<'t>], _u: &[Var<'t>], _t: f64) -> Var<'t> {
        tape.constant(0.0)
    }
}

/// `sum_i w_i (x_i - target_i)^2`
pub struct QuadraticTerminal {
    pub weights: Vec<f64>,
    pub targets: Vec<f64>,
}

impl TerminalCost for QuadraticTerminal {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>]) -> Var<'t> {
        let mut acc = tape.constant(0.0);
        for ((v, &w), &c) in x.iter().zip(&self.weights).zip(&self.targets) {
            if w != 0.0 {
                let d = *v - c;
                acc = acc + d * d * w;
            }
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Catalog.
// ---------------------------------------------------------------------------

/// Environment names accepted by [`make_system`].
pub const ENV_NAMES: &[&str] = &[
    "van-der-pol",
    "pendulum",
    "cart-pole-swing-up",
    "mountain-car",
    "cancer-treatment",
    "mould-fungicide",
    "predator-prey",
    "projectile",
];

/// Catalog row for listings.
pub struct EnvInfo {
    pub name: &'static str,
    pub description: &'static str,
    pub state_dim: usize,
    pub control_dim: usize,
    pub fixed_terminal: bool,
    pub terminal_cost: bool,
}

/// Summaries of every built-in environment (defaults, no overrides).
pub fn catalog() -> Vec<EnvInfo> {
    ENV_NAMES
        .iter()
        .map(|name| {
            let sys =
                make_system(name, &BTreeMap::new()).expect("catalog entries build with defaults");
            EnvInfo {
                name,
                description: describe(name),
                state_dim: sys.state_dim,
                control_dim: sys.control_dim,
                fixed_terminal: sys.has_fixed_terminal(),
                terminal_cost: sys.terminal_cost.is_some(),
            }
        })
        .collect()
}

fn describe(name: &str) -> &'static str {
    match name {
        "van-der-pol" => "drive a forced Van der Pol oscillator to rest",
        "pendulum" => "swing up a torque-limited pendulum",
        "cart-pole-swing-up" => "swing up a pole by translating its cart",
        "mountain-car" => "drive up a valley with limited force",
        "cancer-treatment" => "shrink a tumour with chemotherapy dosing",
        "mould-fungicide" => "suppress a mould population with fungicide",
        "predator-prey" => "minimize a pest population with pesticide",
        "projectile" => "reach a target altitude by choosing launch velocity",
        _ => "",
    }
}

struct Params<'a> {
    env: &'static str,
    map: BTreeMap<String, f64>,
    allowed: &'a [&'a str],
}

impl<'a> Params<'a> {
    fn new(
        env: &'static str,
        overrides: &BTreeMap<String, f64>,
        allowed: &'a [&'a str],
    ) -> Result<Self, SystemError> {
        for key in overrides.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(SystemError::UnknownParameter {
                    env: env.to_owned(),
                    key: key.clone(),
                });
            }
        }
        Ok(Params {
            env,
            map: overrides.clone(),
            allowed,
        })
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        debug_assert!(self.allowed.contains(&key), "{}: {key} not declared", self.env);
        self.map.get(key).copied().unwrap_or(default)
    }
}

/// Build a catalog environment by name, with documented constants optionally
/// overridden. Unknown names and unknown parameter keys are rejected, as are
/// overrides that violate an environment's structural invariants.
pub fn make_system(
    name: &str,
    overrides: &BTreeMap<String, f64>,
) -> Result<ControlSystem, SystemError> {
    match name {
        "van-der-pol" => van_der_pol(overrides),
        "pendulum" => pendulum(overrides),
        "cart-pole-swing-up" => cart_pole(overrides),
        "mountain-car" => mountain_car(overrides),
        "cancer-treatment" => cancer_treatment(overrides),
        "mould-fungicide" => mould_fungicide(overrides),
        "predator-prey" => predator_prey(overrides),
        "projectile" => projectile(overrides),
        other => Err(SystemError::UnknownEnvironment(other.to_owned())),
    }
}

/// Forced Van der Pol oscillator, driven to the origin.
///
/// `ẋ0 = x1`, `ẋ1 = mu (1 - x0^2) x1 - x0 + u`, cost `x0^2 + x1^2 + u^2`.
/// Defaults: `mu = 1`, horizon `[0, 10]`, `x_s = (1, 0)`, `x_f = (0, 0)`,
/// `|u| <= 1`.
fn van_der_pol(overrides: &BTreeMap<String, f64>) -> Result<ControlSystem, SystemError> {
    let p = Params::new("van-der-pol", overrides, &["mu", "t_final", "u_lim"])?;
    let mu = p.get("mu", 1.0);
    let t_final = p.get("t_final", 10.0);
    let u_lim = p.get("u_lim", 1.0);
    struct Vdp {
        mu: f64,
    }
    impl Dynamics for Vdp {
        fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
            vec![x[1], self.mu * ((1.0 - x[0] * x[0]) * x[1]) - x[0] + u[0]]
        }
    }
    ControlSystem::new(
        "van-der-pol",
        2,
        1,
        Arc::new(Vdp { mu }),
        Arc::new(QuadraticCost {
            x_weights: vec![1.0, 1.0],
            u_weights: vec![1.0],
        }),
        (0.0, t_final),
        vec![1.0, 0.0],
    )?
    .with_x_final(vec![0.0, 0.0])?
    .with_control_bounds(vec![(-u_lim, u_lim)])
}

/// Torque-limited pendulum swing-up; angle measured from hanging down.
///
/// `ẋ0 = x1`, `ẋ1 = (u - m g l sin x0) / (m l^2)`, cost `u^2`.
/// Defaults: `m = 1`, `l = 1`, `g = 9.81`, horizon `[0, 5]`,
/// `x_s = (0, 0)`, `x_f = (pi, 0)`, `|u| <= 4`.
fn pendulum(overrides: &BTreeMap<String, f64>) -> Result<ControlSystem, SystemError> {
    let p = Params::new("pendulum", overrides, &["m", "l", "g", "t_final", "u_lim"])?;
    let m = p.get("m", 1.0);
    let l = p.get("l", 1.0);
    let g = p.get("g", 9.81);
    let t_final = p.get("t_final", 5.0);
    let u_lim = p.get("u_lim", 4.0);
    struct Pendulum {
        m: f64,
        l: f64,
        g: f64,
    }
    impl Dynamics for Pendulum {
        fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
            let inertia = self.m * self.l * self.l;
            vec![
                x[1],
                (u[0] - x[0].sin() * (self.m * self.g * self.l)) / inertia,
            ]
        }
    }
    ControlSystem::new(
        "pendulum",
        2,
        1,
        Arc::new(Pendulum { m, l, g }),
        Arc::new(QuadraticCost {
            x_weights: vec![0.0, 0.0],
            u_weights: vec![1.0],
        }),
        (0.0, t_final),
        vec![0.0, 0.0],
    )?
    .with_x_final(vec![PI, 0.0])?
    .with_control_bounds(vec![(-u_lim, u_lim)])
}

/// Cart-pole swing-up (frictionless), pole angle measured from hanging down.
///
/// State `(q, theta, q_dot, theta_dot)`, force `u` on the cart:
///
/// ```text
/// q''     =  [l m2 sin(th) w^2 + u + m2 g cos(th) sin(th)] / [m1 + m2 (1 - cos^2 th)]
/// theta'' = -[l m2 cos(th) sin(th) w^2 + u cos(th) + (m1 + m2) g sin(th)]
///            / [l (m1 + m2 (1 - cos^2 th))]
/// ```
///
/// Cost `u^2`. Defaults: `m1 = 1` (cart), `m2 = 0.3` (pole), `l = 0.5`,
/// `g = 9.81`, horizon `[0, 2]`, `x_s = 0`, `x_f = (1, pi, 0, 0)`,
/// `|u| <= 20`, cart position bounded to `[-2, 3]`.
fn cart_pole(overrides: &BTreeMap<String, f64>) -> Result<ControlSystem, SystemError> {
    let p = Params::new(
        "cart-pole-swing-up",
        overrides,
        &["m1", "m2", "l", "g", "t_final", "u_lim", "q_final"],
    )?;
    let m1 = p.get("m1", 1.0);
    let m2 = p.get("m2", 0.3);
    let l = p.get("l", 0.5);
    let g = p.get("g", 9.81);
    let t_final = p.get("t_final", 2.0);
    let u_lim = p.get("u_lim", 20.0);
    let q_final = p.get("q_final", 1.0);
    struct CartPole {
        m1: f64,
        m2: f64,
        l: f64,
        g: f64,
    }
    impl Dynamics for CartPole {
        fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
            let (th, qd, w) = (x[1], x[2], x[3]);
            let (s, c) = (th.sin(), th.cos());
            let den = m_plus(self.m1, self.m2, c);
            let q_dd = (self.l * self.m2 * (s * w * w) + u[0] + self.m2 * self.g * (c * s)) / den;
            let w_dd = -(self.l * self.m2 * (c * s * w * w)
                + u[0] * c
                + (self.m1 + self.m2) * self.g * s)
                / (den * self.l);
            vec![qd, w, q_dd, w_dd]
        }
    }
    fn m_plus<'t>(m1: f64, m2: f64, c: Var<'t>) -> Var<'t> {
        m1 + m2 * (1.0 - c * c)
    }
    ControlSystem::new(
        "cart-pole-swing-up",
        4,
        1,
        Arc::new(CartPole { m1, m2, l, g }),
        Arc::new(QuadraticCost {
            x_weights: vec![0.0; 4],
            u_weights: vec![1.0],
        }),
        (0.0, t_final),
        vec![0.0, 0.0, 0.0, 0.0],
    )?
    .with_x_final(vec![q_final, PI, 0.0, 0.0])?
    .with_state_bounds(vec![
        (-2.0, 3.0),
        (f64::NEG_INFINITY, f64::INFINITY),
        (f64::NEG_INFINITY, f64::INFINITY),
        (f64::NEG_INFINITY, f64::INFINITY),
    ])?
    .with_control_bounds(vec![(-u_lim, u_lim)])
}

/// Continuous mountain car: drive out of a sinusoidal valley with a weak
/// motor.
///
/// `ẋ0 = x1`, `ẋ1 = power u - 0.0025 cos(3 x0)`, cost `u^2`.
/// Defaults: `power = 0.0015`, horizon `[0, 150]`, `x_s = (-pi/6, 0)`
/// (valley bottom), terminal position pinned to `0.45` (velocity free),
/// `x0 in [-1.2, 0.6]`, `x1 in [-0.07, 0.07]`, `|u| <= 1`.
fn mountain_car(overrides: &BTreeMap<String, f64>) -> Result<ControlSystem, SystemError> {
    let p = Params::new("mountain-car", overrides, &["power", "t_final", "goal"])?;
    let power = p.get("power", 0.0015);
    let t_final = p.get("t_final", 150.0);
    let goal = p.get("goal", 0.45);
    struct MountainCar {
        power: f64,
    }
    impl Dynamics for MountainCar {
        fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
            vec![x[1], u[0] * self.power - (x[0] * 3.0).cos() * 0.0025]
        }
    }
    ControlSystem::new(
        "mountain-car",
        2,
        1,
        Arc::new(MountainCar { power }),
        Arc::new(QuadraticCost {
            x_weights: vec![0.0, 0.0],
            u_weights: vec![1.0],
        }),
        (0.0, t_final),
        vec![-PI / 6.0, 0.0],
    )?
    .with_x_final_partial(vec![Some(goal), None])?
    .with_state_bounds(vec![(-1.2, 0.6), (-0.07, 0.07)])?
    .with_control_bounds(vec![(-1.0, 1.0)])
}

/// Chemotherapy dosing against Gompertzian tumour growth.
///
/// `ẋ = r x ln(1/x) - delta u x`, cost `a x^2 + u^2`.
/// Defaults: `r = 0.3`, `delta = 0.45`, `a = 3`, horizon `[0, 20]`,
/// `x_s = 0.975` (normalized tumour size), `u in [0, 2]`, states kept in
/// `[0.01, 2]` so the logarithm stays in-domain for transcribed iterates.
fn cancer_treatment(overrides: &BTreeMap<String, f64>) -> Result<ControlSystem, SystemError> {
    let p = Params::new(
        "cancer-treatment",
        overrides,
        &["r", "delta", "a", "t_final", "u_max"],
    )?;
    let r = p.get("r", 0.3);
    let delta = p.get("delta", 0.45);
    let a = p.get("a", 3.0);
    let t_final = p.get("t_final", 20.0);
    let u_max = p.get("u_max", 2.0);
    struct Cancer {
        r: f64,
        delta: f64,
    }
    impl Dynamics for Cancer {
        fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
            // r x ln(1/x) = -r x ln x
            vec![-(x[0].ln()) * x[0] * self.r - u[0] * x[0] * self.delta]
        }
    }
    ControlSystem::new(
        "cancer-treatment",
        1,
        1,
        Arc::new(Cancer { r, delta }),
        Arc::new(QuadraticCost {
            x_weights: vec![a],
            u_weights: vec![1.0],
        }),
        (0.0, t_final),
        vec![0.975],
    )?
    .with_state_bounds(vec![(0.01, 2.0)])?
    .with_control_bounds(vec![(0.0, u_max)])
}

/// Mould suppression with fungicide.
///
/// `ẋ = r (m_cap - x) - u x`, cost `a x^2 + u^2`.
/// Defaults: `r = 0.3`, `m_cap = 10`, `a = 1`, horizon `[0, 5]`,
/// `x_s = 1`, `u in [0, 1]`.
fn mould_fungicide(overrides: &BTreeMap<String, f64>) -> Result<ControlSystem, SystemError> {
    let p = Params::new(
        "mould-fungicide",
        overrides,
        &["r", "m_cap", "a", "t_final", "u_max"],
    )?;
    let r = p.get("r", 0.3);
    let m_cap = p.get("m_cap", 10.0);
    let a = p.get("a", 1.0);
    let t_final = p.get("t_final", 5.0);
    let u_max = p.get("u_max", 1.0);
    struct Mould {
        r: f64,
        m_cap: f64,
    }
    impl Dynamics for Mould {
        fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
            vec![(self.m_cap - x[0]) * self.r - u[0] * x[0]]
        }
    }
    ControlSystem::new(
        "mould-fungicide",
        1,
        1,
        Arc::new(Mould { r, m_cap }),
        Arc::new(QuadraticCost {
            x_weights: vec![a],
            u_weights: vec![1.0],
        }),
        (0.0, t_final),
        vec![1.0],
    )?
    .with_control_bounds(vec![(0.0, u_max)])
}

/// Lotka-Volterra pest control: pesticide kills both species; leftover pests
/// are penalized at the end of the season.
///
/// `ẋ0 = x0 (a - b x1) - k0 u x0`, `ẋ1 = x1 (c x0 - d) - k1 u x1`,
/// running cost `u^2`, terminal cost `w x0(T)^2`.
/// Defaults: `a = b = c = d = 1`, `k0 = 0.4`, `k1 = 0.2`, `w = 5`,
/// horizon `[0, 10]`, `x_s = (1.5, 1)`, `u in [0, 1]`.
fn predator_prey(overrides: &BTreeMap<String, f64>) -> Result<ControlSystem, SystemError> {
    let p = Params::new(
        "predator-prey",
        overrides,
        &["a", "b", "c", "d", "k0", "k1", "w", "t_final", "u_max"],
    )?;
    let (a, b) = (p.get("a", 1.0), p.get("b", 1.0));
    let (c, d) = (p.get("c", 1.0), p.get("d", 1.0));
    let (k0, k1) = (p.get("k0", 0.4), p.get("k1", 0.2));
    let w = p.get("w", 5.0);
    let t_final = p.get("t_final", 10.0);
    let u_max = p.get("u_max", 1.0);
    struct PredPrey {
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        k0: f64,
        k1: f64,
    }
    impl Dynamics for PredPrey {
        fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
            vec![
                x[0] * self.a - x[0] * x[1] * self.b - u[0] * x[0] * self.k0,
                x[0] * x[1] * self.c - x[1] * self.d - u[0] * x[1] * self.k1,
            ]
        }
    }
    Ok(ControlSystem::new(
        "predator-prey",
        2,
        1,
        Arc::new(PredPrey { a, b, c, d, k0, k1 }),
        Arc::new(QuadraticCost {
            x_weights: vec![0.0, 0.0],
            u_weights: vec![1.0],
        }),
        (0.0, t_final),
        vec![1.5, 1.0],
    )?
    .with_terminal_cost(Arc::new(QuadraticTerminal {
        weights: vec![w, 0.0],
        targets: vec![0.0, 0.0],
    }))
    .with_control_bounds(vec![(0.0, u_max)])?)
}

/// Ballistic altitude toy: choose a launch velocity so the projectile is at
/// the target altitude at the final time. No controls; the launch velocity
/// is a free start-state coordinate.
///
/// `ẋ0 = x1` (altitude), `ẋ1 = -g`, zero cost.
/// Defaults: `g = 9.81`, horizon `[0, 100]`, target altitude `100` at
/// `t = 100`; velocity at the final time is unconstrained.
fn projectile(overrides: &BTreeMap<String, f64>) -> Result<ControlSystem, SystemError> {
    let p = Params::new(
        "projectile",
        overrides,
        &["g", "t_final", "target_altitude"],
    )?;
    let g = p.get("g", 9.81);
    let t_final = p.get("t_final", 100.0);
    let target = p.get("target_altitude", 100.0);
    struct Ballistic {
        g: f64,
    }
    impl Dynamics for Ballistic {
        fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], _u: &[Var<'t>]) -> Vec<Var<'t>> {
            let minus_g = x[0].tape().constant(-self.g);
            vec![x[1], minus_g]
        }
    }
    ControlSystem::new(
        "projectile",
        2,
        0,
        Arc::new(Ballistic { g }),
        Arc::new(ZeroCost),
        (0.0, t_final),
        vec![0.0, 0.0],
    )?
    .with_x_final_partial(vec![Some(target), None])?
    .with_free_start(vec![1])
}
