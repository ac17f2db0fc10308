//! Direct transcription: turn a [`ControlSystem`] into a finite
//! [`NlpProblem`] over discretized decision variables.
//!
//! Four methods:
//!
//! * [`single_shooting`]: decision variables are the control nodes alone;
//!   states come from one whole-horizon rollout.
//! * [`multiple_shooting`]: adds interval-boundary states as decision
//!   variables, tied together by integration-defect equality constraints.
//! * [`trapezoidal_collocation`]: states and controls at all grid nodes,
//!   trapezoid-rule defects and cost quadrature.
//! * [`hermite_simpson_collocation`]: adds midpoint controls; Simpson
//!   defects through a Hermite-interpolated midpoint state.
//!
//! Defect constraints are scaled by `1/h` per segment so residual
//! magnitudes are grid-invariant. Initial guesses are deterministic:
//! controls at the midpoint of their bounds (zero if unbounded), states
//! linearly interpolated from the start state to the pinned terminal
//! coordinates (held at the start value where unpinned).

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::ad::{ScalarField, Tape, Var, VectorField};
use crate::integrate::{rollout_vars, InterpScheme, IntegratorKind, SplineVars};
use crate::linalg::Mat;
use crate::systems::{augment_dynamics, AugmentedDynamics, ControlSystem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TranscribeError {
    #[error("single shooting cannot enforce state bounds")]
    StateBoundsUnsupported,
    #[error("control-interval count {n} is not divisible into {intervals} shooting intervals")]
    NonDivisible { n: usize, intervals: usize },
    #[error("{0}")]
    BadConfig(&'static str),
}

/// How a flat decision vector maps to (free start coordinates, state nodes,
/// control nodes), in that order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionLayout {
    pub n_free_start: usize,
    pub n_state_nodes: usize,
    pub state_dim: usize,
    pub n_control_nodes: usize,
    pub control_dim: usize,
}

impl DecisionLayout {
    pub fn n_decision(&self) -> usize {
        self.n_free_start
            + self.n_state_nodes * self.state_dim
            + self.n_control_nodes * self.control_dim
    }

    fn state_base(&self) -> usize {
        self.n_free_start
    }

    fn control_base(&self) -> usize {
        self.n_free_start + self.n_state_nodes * self.state_dim
    }

    pub fn state_index(&self, node: usize, dim: usize) -> usize {
        debug_assert!(node < self.n_state_nodes && dim < self.state_dim);
        self.state_base() + node * self.state_dim + dim
    }

    pub fn control_index(&self, node: usize, dim: usize) -> usize {
        debug_assert!(node < self.n_control_nodes && dim < self.control_dim);
        self.control_base() + node * self.control_dim + dim
    }

    /// Split a decision vector into (free-start, state-node matrix,
    /// control-node matrix). Inverse of [`DecisionLayout::ravel`].
    pub fn unravel(&self, y: &[f64]) -> (Vec<f64>, Mat, Mat) {
        assert_eq!(y.len(), self.n_decision(), "decision length mismatch");
        let free = y[..self.n_free_start].to_vec();
        let states = Mat::from_vec(
            self.n_state_nodes,
            self.state_dim,
            y[self.state_base()..self.control_base()].to_vec(),
        );
        let controls = Mat::from_vec(
            self.n_control_nodes,
            self.control_dim,
            y[self.control_base()..].to_vec(),
        );
        (free, states, controls)
    }

    /// Flatten (free-start, states, controls) back into a decision vector.
    pub fn ravel(&self, free: &[f64], states: &Mat, controls: &Mat) -> Vec<f64> {
        assert_eq!(free.len(), self.n_free_start);
        assert_eq!(states.rows(), self.n_state_nodes);
        assert_eq!(states.cols(), self.state_dim);
        assert_eq!(controls.rows(), self.n_control_nodes);
        assert_eq!(controls.cols(), self.control_dim);
        let mut y = Vec::with_capacity(self.n_decision());
        y.extend_from_slice(free);
        y.extend_from_slice(states.data());
        y.extend_from_slice(controls.data());
        y
    }

    /// Tape-variable view of a decision slice, split into the same parts.
    fn split_vars<'y, 't>(
        &self,
        y: &'y [Var<'t>],
    ) -> (&'y [Var<'t>], Vec<Vec<Var<'t>>>, Vec<Vec<Var<'t>>>) {
        let free = &y[..self.n_free_start];
        let states = (0..self.n_state_nodes)
            .map(|i| {
                let b = self.state_base() + i * self.state_dim;
                y[b..b + self.state_dim].to_vec()
            })
            .collect();
        let controls = (0..self.n_control_nodes)
            .map(|i| {
                let b = self.control_base() + i * self.control_dim;
                y[b..b + self.control_dim].to_vec()
            })
            .collect();
        (free, states, controls)
    }
}

/// A nonlinear program: differentiable objective and equality-constraint
/// residuals over a flat decision vector with box bounds and a deterministic
/// initial guess.
#[derive(Clone)]
pub struct NlpProblem {
    pub objective: Arc<dyn ScalarField>,
    pub constraints: Arc<dyn VectorField>,
    pub n_constraints: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub x0_guess: Vec<f64>,
    pub layout: DecisionLayout,
    /// Times of the state nodes (empty when states are not decisions).
    pub state_times: Vec<f64>,
    /// Times of the control nodes.
    pub control_times: Vec<f64>,
}

impl NlpProblem {
    pub fn n_decision(&self) -> usize {
        self.layout.n_decision()
    }

    /// Objective value at a numeric point.
    pub fn objective_value(&self, y: &[f64]) -> f64 {
        let tape = Tape::new();
        let vars = tape.vars(y);
        self.objective.eval(&tape, &vars).value()
    }

    /// Constraint residuals at a numeric point.
    pub fn constraint_values(&self, y: &[f64]) -> Vec<f64> {
        let tape = Tape::new();
        let vars = tape.vars(y);
        self.constraints
            .eval(&tape, &vars)
            .into_iter()
            .map(|v| v.value())
            .collect()
    }

    fn assert_guess_feasible(&self) {
        for ((&g, &lo), &hi) in self.x0_guess.iter().zip(&self.lower).zip(&self.upper) {
            debug_assert!(g >= lo && g <= hi, "initial guess violates box bounds");
        }
    }
}

/// Shooting discretization: `n_controls` control nodes (N+1), the number of
/// shooting intervals for multiple shooting, integration substeps per
/// control interval, and the integrator/interpolation pairing.
#[derive(Debug, Clone)]
pub struct ShootingConfig {
    pub n_controls: usize,
    pub n_intervals: usize,
    pub steps_per_interval: usize,
    pub integrator: IntegratorKind,
    /// `None` selects the integrator's default pairing.
    pub interpolation: Option<InterpScheme>,
    /// Single shooting cannot honor state bounds; asking for them is an
    /// error rather than a silent drop.
    pub enforce_state_bounds: bool,
}

impl ShootingConfig {
    pub fn new(n_controls: usize, n_intervals: usize) -> Self {
        ShootingConfig {
            n_controls,
            n_intervals,
            steps_per_interval: 1,
            integrator: IntegratorKind::Rk4,
            interpolation: None,
            enforce_state_bounds: false,
        }
    }

    pub fn with_integrator(mut self, kind: IntegratorKind) -> Self {
        self.integrator = kind;
        self
    }

    pub fn with_steps_per_interval(mut self, steps: usize) -> Self {
        self.steps_per_interval = steps;
        self
    }

    fn scheme(&self) -> InterpScheme {
        self.interpolation
            .unwrap_or_else(|| self.integrator.default_interpolation())
    }

    fn validate(&self) -> Result<(), TranscribeError> {
        if self.n_controls < 2 {
            return Err(TranscribeError::BadConfig("need at least two control nodes"));
        }
        if self.steps_per_interval == 0 {
            return Err(TranscribeError::BadConfig("steps_per_interval must be >= 1"));
        }
        Ok(())
    }
}

fn uniform_times(t0: f64, t1: f64, n_nodes: usize) -> Vec<f64> {
    (0..n_nodes)
        .map(|i| t0 + (t1 - t0) * i as f64 / (n_nodes - 1) as f64)
        .collect()
}

fn control_guess(sys: &ControlSystem) -> Vec<f64> {
    match &sys.control_bounds {
        Some(b) => b
            .iter()
            .map(|&(lo, hi)| {
                if lo.is_finite() && hi.is_finite() {
                    0.5 * (lo + hi)
                } else {
                    0.0
                }
            })
            .collect(),
        None => vec![0.0; sys.control_dim],
    }
}

fn control_bounds_row(sys: &ControlSystem) -> Vec<(f64, f64)> {
    sys.control_bounds
        .clone()
        .unwrap_or_else(|| vec![(f64::NEG_INFINITY, f64::INFINITY); sys.control_dim])
}

fn state_bounds_row(sys: &ControlSystem) -> Vec<(f64, f64)> {
    sys.state_bounds
        .clone()
        .unwrap_or_else(|| vec![(f64::NEG_INFINITY, f64::INFINITY); sys.state_dim])
}

/// Linear interpolation from the start state toward the pinned terminal
/// coordinates; unpinned coordinates hold the start value.
fn state_guess_at(sys: &ControlSystem, frac: f64) -> Vec<f64> {
    (0..sys.state_dim)
        .map(|d| {
            let pin = sys.x_final.as_ref().and_then(|xf| xf[d]);
            match pin {
                Some(target) => sys.x_start[d] * (1.0 - frac) + target * frac,
                None => sys.x_start[d],
            }
        })
        .collect()
}

/// Start state as tape variables: free coordinates come from the decision
/// vector, the rest are constants; the running-cost coordinate is appended.
fn start_state_vars<'t>(
    sys: &ControlSystem,
    tape: &'t Tape,
    free: &[Var<'t>],
) -> Vec<Var<'t>> {
    let mut x0 = Vec::with_capacity(sys.state_dim + 1);
    let mut fi = 0;
    for d in 0..sys.state_dim {
        if sys.free_start.contains(&d) {
            x0.push(free[fi]);
            fi += 1;
        } else {
            x0.push(tape.constant(sys.x_start[d]));
        }
    }
    x0.push(tape.constant(0.0));
    x0
}

// ---------------------------------------------------------------------------
// Single shooting.
// ---------------------------------------------------------------------------

struct SingleShooting {
    sys: ControlSystem,
    aug: AugmentedDynamics,
    layout: DecisionLayout,
    control_times: Vec<f64>,
    integrator: IntegratorKind,
    scheme: InterpScheme,
    n_steps: usize,
}

impl SingleShooting {
    fn final_state<'t>(&self, tape: &'t Tape, y: &[Var<'t>]) -> (Vec<Var<'t>>, Var<'t>) {
        let (free, _, u_nodes) = self.layout.split_vars(y);
        let x0 = start_state_vars(&self.sys, tape, free);
        let sv = SplineVars {
            nodes: &u_nodes,
            times: &self.control_times,
            scheme: self.scheme,
        };
        let dt = (self.sys.t_final - self.sys.t_start) / self.n_steps as f64;
        let (nodes, cost) = rollout_vars(
            self.integrator,
            &self.aug,
            tape,
            &x0,
            &sv,
            self.sys.t_start,
            dt,
            self.n_steps,
        );
        let last = nodes.last().expect("rollout returns >= 1 node");
        (last[..self.sys.state_dim].to_vec(), cost)
    }
}

struct SingleShootingObjective(Arc<SingleShooting>);

impl ScalarField for SingleShootingObjective {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>]) -> Var<'t> {
        let (xf, cost) = self.0.final_state(tape, y);
        match &self.0.sys.terminal_cost {
            Some(tc) => cost + tc.eval(tape, &xf),
            None => cost,
        }
    }
}

struct SingleShootingConstraints(Arc<SingleShooting>);

impl VectorField for SingleShootingConstraints {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>]) -> Vec<Var<'t>> {
        let (xf, _) = self.0.final_state(tape, y);
        let mut out = Vec::new();
        if let Some(pins) = &self.0.sys.x_final {
            for (d, pin) in pins.iter().enumerate() {
                if let Some(target) = pin {
                    out.push(xf[d] - *target);
                }
            }
        }
        out
    }
}

/// Transcribe with control nodes as the only decision variables (plus any
/// free start coordinates). The whole horizon is one rollout; terminal pins
/// become equality constraints. `cfg.n_intervals` is ignored.
pub fn single_shooting(
    sys: &ControlSystem,
    cfg: &ShootingConfig,
) -> Result<NlpProblem, TranscribeError> {
    cfg.validate()?;
    if cfg.enforce_state_bounds {
        return Err(TranscribeError::StateBoundsUnsupported);
    }
    let n_nodes = cfg.n_controls;
    let layout = DecisionLayout {
        n_free_start: sys.free_start.len(),
        n_state_nodes: 0,
        state_dim: sys.state_dim,
        n_control_nodes: n_nodes,
        control_dim: sys.control_dim,
    };
    let control_times = uniform_times(sys.t_start, sys.t_final, n_nodes);
    let n_steps = (n_nodes - 1) * cfg.steps_per_interval;

    let n_constraints = sys
        .x_final
        .as_ref()
        .map_or(0, |xf| xf.iter().filter(|p| p.is_some()).count());

    let mut lower = Vec::with_capacity(layout.n_decision());
    let mut upper = Vec::with_capacity(layout.n_decision());
    let mut guess = Vec::with_capacity(layout.n_decision());
    let sb = state_bounds_row(sys);
    for &d in &sys.free_start {
        lower.push(sb[d].0);
        upper.push(sb[d].1);
        guess.push(sys.x_start[d]);
    }
    let cb = control_bounds_row(sys);
    let cg = control_guess(sys);
    for _ in 0..n_nodes {
        for d in 0..sys.control_dim {
            lower.push(cb[d].0);
            upper.push(cb[d].1);
            guess.push(cg[d]);
        }
    }

    let shared = Arc::new(SingleShooting {
        sys: sys.clone(),
        aug: augment_dynamics(sys),
        layout: layout.clone(),
        control_times: control_times.clone(),
        integrator: cfg.integrator,
        scheme: cfg.scheme(),
        n_steps,
    });
    let p = NlpProblem {
        objective: Arc::new(SingleShootingObjective(Arc::clone(&shared))),
        constraints: Arc::new(SingleShootingConstraints(shared)),
        n_constraints,
        lower,
        upper,
        x0_guess: guess,
        layout,
        state_times: Vec::new(),
        control_times,
    };
    p.assert_guess_feasible();
    Ok(p)
}

// ---------------------------------------------------------------------------
// Multiple shooting.
// ---------------------------------------------------------------------------

struct MultipleShooting {
    sys: ControlSystem,
    aug: AugmentedDynamics,
    layout: DecisionLayout,
    control_times: Vec<f64>,
    boundary_times: Vec<f64>,
    integrator: IntegratorKind,
    scheme: InterpScheme,
    controls_per_interval: usize,
    steps_per_control: usize,
}

impl MultipleShooting {
    /// Roll each interval from its boundary-state decision variables;
    /// returns per-interval (final state, accumulated cost).
    #[allow(clippy::type_complexity)]
    fn interval_ends<'t>(
        &self,
        tape: &'t Tape,
        y: &[Var<'t>],
    ) -> (Vec<Vec<Var<'t>>>, Vec<Var<'t>>, Vec<Vec<Var<'t>>>) {
        let (_, x_nodes, u_nodes) = self.layout.split_vars(y);
        let sv = SplineVars {
            nodes: &u_nodes,
            times: &self.control_times,
            scheme: self.scheme,
        };
        let n_int = self.boundary_times.len() - 1;
        let mut ends = Vec::with_capacity(n_int);
        let mut costs = Vec::with_capacity(n_int);
        for i in 0..n_int {
            let t0 = self.boundary_times[i];
            let t1 = self.boundary_times[i + 1];
            let steps = self.controls_per_interval * self.steps_per_control;
            let dt = (t1 - t0) / steps as f64;
            let mut x0 = x_nodes[i].clone();
            x0.push(tape.constant(0.0));
            let (nodes, cost) =
                rollout_vars(self.integrator, &self.aug, tape, &x0, &sv, t0, dt, steps);
            let last = nodes.last().expect("rollout returns >= 1 node");
            ends.push(last[..self.sys.state_dim].to_vec());
            costs.push(cost);
        }
        (ends, costs, x_nodes)
    }
}

struct MultipleShootingObjective(Arc<MultipleShooting>);

impl ScalarField for MultipleShootingObjective {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>]) -> Var<'t> {
        let (_, costs, x_nodes) = self.0.interval_ends(tape, y);
        let mut total = tape.constant(0.0);
        for c in costs {
            total = total + c;
        }
        if let Some(tc) = &self.0.sys.terminal_cost {
            let xf = x_nodes.last().expect("at least one boundary node");
            total = total + tc.eval(tape, xf);
        }
        total
    }
}

struct MultipleShootingConstraints(Arc<MultipleShooting>);

impl VectorField for MultipleShootingConstraints {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>]) -> Vec<Var<'t>> {
        let ms = &self.0;
        let (ends, _, x_nodes) = ms.interval_ends(tape, y);
        let mut out = Vec::new();
        // defects, scaled by 1/h per interval
        for (i, end) in ends.iter().enumerate() {
            let h = ms.boundary_times[i + 1] - ms.boundary_times[i];
            for d in 0..ms.sys.state_dim {
                out.push((x_nodes[i + 1][d] - end[d]) / h);
            }
        }
        // start pin (free coordinates excluded)
        for d in 0..ms.sys.state_dim {
            if !ms.sys.free_start.contains(&d) {
                out.push(x_nodes[0][d] - ms.sys.x_start[d]);
            }
        }
        // terminal pins
        if let Some(pins) = &ms.sys.x_final {
            let xn = x_nodes.last().expect("at least one boundary node");
            for (d, pin) in pins.iter().enumerate() {
                if let Some(target) = pin {
                    out.push(xn[d] - *target);
                }
            }
        }
        out
    }
}

/// Transcribe by breaking the horizon into shooting intervals whose
/// boundary states are decision variables, with integration-defect equality
/// constraints gluing them together. `cfg.n_intervals` must divide the
/// number of control intervals.
pub fn multiple_shooting(
    sys: &ControlSystem,
    cfg: &ShootingConfig,
) -> Result<NlpProblem, TranscribeError> {
    cfg.validate()?;
    let n = cfg.n_controls - 1;
    let n_int = cfg.n_intervals;
    if n_int == 0 || n % n_int != 0 {
        return Err(TranscribeError::NonDivisible { n, intervals: n_int });
    }
    let k = n / n_int;
    let layout = DecisionLayout {
        n_free_start: 0,
        n_state_nodes: n_int + 1,
        state_dim: sys.state_dim,
        n_control_nodes: cfg.n_controls,
        control_dim: sys.control_dim,
    };
    let control_times = uniform_times(sys.t_start, sys.t_final, cfg.n_controls);
    let boundary_times: Vec<f64> = (0..=n_int).map(|i| control_times[i * k]).collect();

    let n_pins_start = sys.state_dim - sys.free_start.len();
    let n_pins_final = sys
        .x_final
        .as_ref()
        .map_or(0, |xf| xf.iter().filter(|p| p.is_some()).count());
    let n_constraints = n_int * sys.state_dim + n_pins_start + n_pins_final;

    let mut lower = Vec::with_capacity(layout.n_decision());
    let mut upper = Vec::with_capacity(layout.n_decision());
    let mut guess = Vec::with_capacity(layout.n_decision());
    let sb = state_bounds_row(sys);
    for i in 0..=n_int {
        let frac = i as f64 / n_int as f64;
        let gx = state_guess_at(sys, frac);
        for d in 0..sys.state_dim {
            lower.push(sb[d].0);
            upper.push(sb[d].1);
            guess.push(gx[d]);
        }
    }
    let cb = control_bounds_row(sys);
    let cg = control_guess(sys);
    for _ in 0..cfg.n_controls {
        for d in 0..sys.control_dim {
            lower.push(cb[d].0);
            upper.push(cb[d].1);
            guess.push(cg[d]);
        }
    }

    let shared = Arc::new(MultipleShooting {
        sys: sys.clone(),
        aug: augment_dynamics(sys),
        layout: layout.clone(),
        control_times: control_times.clone(),
        boundary_times: boundary_times.clone(),
        integrator: cfg.integrator,
        scheme: cfg.scheme(),
        controls_per_interval: k,
        steps_per_control: cfg.steps_per_interval,
    });
    let p = NlpProblem {
        objective: Arc::new(MultipleShootingObjective(Arc::clone(&shared))),
        constraints: Arc::new(MultipleShootingConstraints(shared)),
        n_constraints,
        lower,
        upper,
        x0_guess: guess,
        layout,
        state_times: boundary_times,
        control_times,
    };
    p.assert_guess_feasible();
    Ok(p)
}

// ---------------------------------------------------------------------------
// Collocation (trapezoidal and Hermite-Simpson).
// ---------------------------------------------------------------------------

struct Collocation {
    sys: ControlSystem,
    layout: DecisionLayout,
    /// Node times (states); Hermite-Simpson controls interleave midpoints.
    node_times: Vec<f64>,
    hermite_simpson: bool,
}

impl Collocation {
    fn h(&self, seg: usize) -> f64 {
        self.node_times[seg + 1] - self.node_times[seg]
    }

    fn n_segments(&self) -> usize {
        self.node_times.len() - 1
    }

    /// Control vars at node `i` (Hermite-Simpson stores them at even rows).
    fn u_node<'s, 't>(&self, u: &'s [Vec<Var<'t>>], i: usize) -> &'s Vec<Var<'t>> {
        if self.hermite_simpson {
            &u[2 * i]
        } else {
            &u[i]
        }
    }

    fn u_mid<'s, 't>(&self, u: &'s [Vec<Var<'t>>], seg: usize) -> &'s Vec<Var<'t>> {
        debug_assert!(self.hermite_simpson);
        &u[2 * seg + 1]
    }
}

struct CollocationObjective(Arc<Collocation>);

impl ScalarField for CollocationObjective {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>]) -> Var<'t> {
        let c = &self.0;
        let (_, x, u) = c.layout.split_vars(y);
        let sys = &c.sys;
        let mut total = tape.constant(0.0);
        for seg in 0..c.n_segments() {
            let h = c.h(seg);
            let (t0, t1) = (c.node_times[seg], c.node_times[seg + 1]);
            let c0 = sys.cost.eval(tape, &x[seg], c.u_node(&u, seg), t0);
            let c1 = sys.cost.eval(tape, &x[seg + 1], c.u_node(&u, seg + 1), t1);
            if c.hermite_simpson {
                let f0 = sys.dynamics.eval(tape, &x[seg], c.u_node(&u, seg));
                let f1 = sys.dynamics.eval(tape, &x[seg + 1], c.u_node(&u, seg + 1));
                let xm = hermite_midpoint(&x[seg], &x[seg + 1], &f0, &f1, h);
                let cm = sys.cost.eval(tape, &xm, c.u_mid(&u, seg), 0.5 * (t0 + t1));
                total = total + (c0 + cm * 4.0 + c1) * (h / 6.0);
            } else {
                total = total + (c0 + c1) * (h / 2.0);
            }
        }
        if let Some(tc) = &sys.terminal_cost {
            total = total + tc.eval(tape, x.last().expect("grid has nodes"));
        }
        total
    }
}

struct CollocationConstraints(Arc<Collocation>);

impl VectorField for CollocationConstraints {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>]) -> Vec<Var<'t>> {
        let c = &self.0;
        let (_, x, u) = c.layout.split_vars(y);
        let sys = &c.sys;
        let d = sys.state_dim;
        let mut out = Vec::new();
        for seg in 0..c.n_segments() {
            let h = c.h(seg);
            let f0 = sys.dynamics.eval(tape, &x[seg], c.u_node(&u, seg));
            let f1 = sys.dynamics.eval(tape, &x[seg + 1], c.u_node(&u, seg + 1));
            if c.hermite_simpson {
                let xm = hermite_midpoint(&x[seg], &x[seg + 1], &f0, &f1, h);
                let fm = sys.dynamics.eval(tape, &xm, c.u_mid(&u, seg));
                for j in 0..d {
                    // (x1 - x0 - h/6 (f0 + 4 fm + f1)) / h
                    let quad = (f0[j] + fm[j] * 4.0 + f1[j]) * (h / 6.0);
                    out.push((x[seg + 1][j] - x[seg][j] - quad) / h);
                }
            } else {
                for j in 0..d {
                    let quad = (f0[j] + f1[j]) * (h / 2.0);
                    out.push((x[seg + 1][j] - x[seg][j] - quad) / h);
                }
            }
        }
        for j in 0..d {
            if !sys.free_start.contains(&j) {
                out.push(x[0][j] - sys.x_start[j]);
            }
        }
        if let Some(pins) = &sys.x_final {
            let xn = x.last().expect("grid has nodes");
            for (j, pin) in pins.iter().enumerate() {
                if let Some(target) = pin {
                    out.push(xn[j] - *target);
                }
            }
        }
        out
    }
}

/// Hermite cubic midpoint state: `(x0 + x1)/2 + h/8 (f0 - f1)`.
fn hermite_midpoint<'t>(
    x0: &[Var<'t>],
    x1: &[Var<'t>],
    f0: &[Var<'t>],
    f1: &[Var<'t>],
    h: f64,
) -> Vec<Var<'t>> {
    x0.iter()
        .zip(x1)
        .zip(f0.iter().zip(f1))
        .map(|((&a, &b), (&fa, &fb))| (a + b) * 0.5 + (fa - fb) * (h / 8.0))
        .collect()
}

fn collocation(
    sys: &ControlSystem,
    n_segments: usize,
    hermite_simpson: bool,
) -> Result<NlpProblem, TranscribeError> {
    if n_segments == 0 {
        return Err(TranscribeError::BadConfig("n_segments must be >= 1"));
    }
    let n_nodes = n_segments + 1;
    let n_control_nodes = if hermite_simpson {
        2 * n_segments + 1
    } else {
        n_nodes
    };
    let layout = DecisionLayout {
        n_free_start: 0,
        n_state_nodes: n_nodes,
        state_dim: sys.state_dim,
        n_control_nodes,
        control_dim: sys.control_dim,
    };
    let node_times = uniform_times(sys.t_start, sys.t_final, n_nodes);
    let control_times = uniform_times(sys.t_start, sys.t_final, n_control_nodes);

    let n_pins_start = sys.state_dim - sys.free_start.len();
    let n_pins_final = sys
        .x_final
        .as_ref()
        .map_or(0, |xf| xf.iter().filter(|p| p.is_some()).count());
    let n_constraints = n_segments * sys.state_dim + n_pins_start + n_pins_final;

    let mut lower = Vec::with_capacity(layout.n_decision());
    let mut upper = Vec::with_capacity(layout.n_decision());
    let mut guess = Vec::with_capacity(layout.n_decision());
    let sb = state_bounds_row(sys);
    for i in 0..n_nodes {
        let frac = i as f64 / n_segments as f64;
        let gx = state_guess_at(sys, frac);
        for d in 0..sys.state_dim {
            lower.push(sb[d].0);
            upper.push(sb[d].1);
            guess.push(gx[d]);
        }
    }
    let cb = control_bounds_row(sys);
    let cg = control_guess(sys);
    for _ in 0..n_control_nodes {
        for d in 0..sys.control_dim {
            lower.push(cb[d].0);
            upper.push(cb[d].1);
            guess.push(cg[d]);
        }
    }

    let shared = Arc::new(Collocation {
        sys: sys.clone(),
        layout: layout.clone(),
        node_times: node_times.clone(),
        hermite_simpson,
    });
    let p = NlpProblem {
        objective: Arc::new(CollocationObjective(Arc::clone(&shared))),
        constraints: Arc::new(CollocationConstraints(shared)),
        n_constraints,
        lower,
        upper,
        x0_guess: guess,
        layout,
        state_times: node_times,
        control_times,
    };
    p.assert_guess_feasible();
    Ok(p)
}

/// Transcribe with states and controls at all grid nodes; trapezoid-rule
/// defects per segment and trapezoid cost quadrature.
pub fn trapezoidal_collocation(
    sys: &ControlSystem,
    n_segments: usize,
) -> Result<NlpProblem, TranscribeError> {
    collocation(sys, n_segments, false)
}

/// Transcribe with per-segment midpoint controls, Hermite-interpolated
/// midpoint states, and Simpson defects/quadrature.
pub fn hermite_simpson_collocation(
    sys: &ControlSystem,
    n_segments: usize,
) -> Result<NlpProblem, TranscribeError> {
    collocation(sys, n_segments, true)
}
