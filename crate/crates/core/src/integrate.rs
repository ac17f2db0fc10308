//! Fixed-step explicit integrators and control interpolation.
//!
//! Four explicit schemes (Euler, Heun, midpoint, classical Runge-Kutta 4)
//! step tape-recorded dynamics, so every rollout is differentiable with
//! respect to control nodes, initial states, and any parameters reachable
//! through the right-hand side. Uniform grids only: fixed step counts keep
//! transcription shapes static.
//!
//! Control signals are [`ControlSpline`]s: values at grid nodes interpolated
//! piecewise-constant or piecewise-linear. Times outside the node range are
//! clamped to the nearest endpoint, because solver iterates may query
//! boundary times under floating-point drift.

use alloc::sync::Arc;
use alloc::vec::Vec;
use thiserror::Error;

use crate::ad::{Tape, Var};
use crate::linalg::Mat;
use crate::systems::{augment_dynamics, AugmentedDynamics, ControlSystem, Dynamics, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrateError {
    #[error("state became non-finite at t = {t} (integration blow-up)")]
    Blowup { t: f64 },
    #[error("{0}")]
    Invalid(&'static str),
}

/// Explicit fixed-step schemes. Stage counts: 1, 2, 2, 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegratorKind {
    Euler,
    Heun,
    Midpoint,
    Rk4,
}

impl IntegratorKind {
    /// Derivative evaluations per step.
    pub fn stages(self) -> usize {
        match self {
            IntegratorKind::Euler => 1,
            IntegratorKind::Heun | IntegratorKind::Midpoint => 2,
            IntegratorKind::Rk4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IntegratorKind::Euler => "euler",
            IntegratorKind::Heun => "heun",
            IntegratorKind::Midpoint => "midpoint",
            IntegratorKind::Rk4 => "rk4",
        }
    }

    /// Default control-interpolation pairing: single-stage Euler reads one
    /// control per step, the multi-stage schemes query between nodes and
    /// pair with linear interpolation.
    pub fn default_interpolation(self) -> InterpScheme {
        match self {
            IntegratorKind::Euler => InterpScheme::PiecewiseConstant,
            _ => InterpScheme::PiecewiseLinear,
        }
    }

    pub fn all() -> [IntegratorKind; 4] {
        [
            IntegratorKind::Euler,
            IntegratorKind::Heun,
            IntegratorKind::Midpoint,
            IntegratorKind::Rk4,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpScheme {
    PiecewiseConstant,
    PiecewiseLinear,
}

/// Bracketing shared by the numeric and tape interpolation paths: indices of
/// the two nodes and the weight of the right one. A weight of exactly zero
/// means "return the left node unchanged", so interpolation reproduces node
/// values bit-exactly at node times.
fn bracket(times: &[f64], scheme: InterpScheme, t: f64) -> (usize, usize, f64) {
    let n = times.len();
    if t <= times[0] {
        return (0, 0, 0.0);
    }
    if t >= times[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    // last index with times[i] <= t
    let i = times.partition_point(|&ti| ti <= t) - 1;
    match scheme {
        InterpScheme::PiecewiseConstant => (i, i, 0.0),
        InterpScheme::PiecewiseLinear => {
            if times[i] == t {
                (i, i, 0.0)
            } else {
                let w = (t - times[i]) / (times[i + 1] - times[i]);
                (i, i + 1, w)
            }
        }
    }
}

/// Control nodes on a time grid with an interpolation scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpline {
    /// `(N+1) x M`
    pub nodes: Mat,
    pub times: Vec<f64>,
    pub scheme: InterpScheme,
}

impl ControlSpline {
    pub fn new(nodes: Mat, times: Vec<f64>, scheme: InterpScheme) -> Result<Self, IntegrateError> {
        if nodes.rows() != times.len() {
            return Err(IntegrateError::Invalid("node rows must match node times"));
        }
        if times.is_empty() {
            return Err(IntegrateError::Invalid("spline needs at least one node"));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IntegrateError::Invalid(
                "node times must be strictly increasing",
            ));
        }
        Ok(ControlSpline {
            nodes,
            times,
            scheme,
        })
    }

    /// Uniform grid over `[t0, t1]`.
    pub fn uniform(
        nodes: Mat,
        t0: f64,
        t1: f64,
        scheme: InterpScheme,
    ) -> Result<Self, IntegrateError> {
        let n = nodes.rows();
        if n < 2 {
            return Err(IntegrateError::Invalid("uniform spline needs >= 2 nodes"));
        }
        let times = (0..n)
            .map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64)
            .collect();
        ControlSpline::new(nodes, times, scheme)
    }

    pub fn control_dim(&self) -> usize {
        self.nodes.cols()
    }

    /// Interpolated control value at `t`, clamped to the node range.
    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        let (i, j, w) = bracket(&self.times, self.scheme, t);
        if w == 0.0 {
            return self.nodes.row(i).to_vec();
        }
        self.nodes
            .row(i)
            .iter()
            .zip(self.nodes.row(j))
            .map(|(a, b)| a * (1.0 - w) + b * w)
            .collect()
    }
}

/// Right-hand side `f(x, u, t)` recorded on a tape. The cost-augmented
/// system dynamics implement this; plain time-invariant dynamics wrap via
/// [`Autonomous`].
pub trait OdeRhs: Send + Sync {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>], t: f64) -> Vec<Var<'t>>;
}

impl OdeRhs for AugmentedDynamics {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>], t: f64) -> Vec<Var<'t>> {
        AugmentedDynamics::eval(self, tape, x, u, t)
    }
}

/// Adapter exposing time-independent dynamics as an [`OdeRhs`].
pub struct Autonomous(pub Arc<dyn Dynamics>);

impl OdeRhs for Autonomous {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>], _t: f64) -> Vec<Var<'t>> {
        self.0.eval(tape, x, u)
    }
}

/// Tape-resident control nodes: the transcription methods interpolate
/// decision variables, not numbers.
pub(crate) struct SplineVars<'a, 't> {
    pub nodes: &'a [Vec<Var<'t>>],
    pub times: &'a [f64],
    pub scheme: InterpScheme,
}

impl<'t> SplineVars<'_, 't> {
    pub fn interpolate(&self, t: f64) -> Vec<Var<'t>> {
        let (i, j, w) = bracket(self.times, self.scheme, t);
        if w == 0.0 {
            return self.nodes[i].clone();
        }
        self.nodes[i]
            .iter()
            .zip(&self.nodes[j])
            .map(|(&a, &b)| a * (1.0 - w) + b * w)
            .collect()
    }
}

/// One explicit step on tape variables. Stage controls are interpolated at
/// the stage times each scheme requires.
pub(crate) fn step_vars<'t>(
    kind: IntegratorKind,
    rhs: &dyn OdeRhs,
    tape: &'t Tape,
    x: &[Var<'t>],
    spline: &SplineVars<'_, 't>,
    t: f64,
    dt: f64,
) -> Vec<Var<'t>> {
    let axpy = |x: &[Var<'t>], k: &[Var<'t>], h: f64| -> Vec<Var<'t>> {
        x.iter().zip(k).map(|(&xi, &ki)| xi + ki * h).collect()
    };
    match kind {
        IntegratorKind::Euler => {
            let u = spline.interpolate(t);
            let k1 = rhs.eval(tape, x, &u, t);
            axpy(x, &k1, dt)
        }
        IntegratorKind::Heun => {
            let u0 = spline.interpolate(t);
            let k1 = rhs.eval(tape, x, &u0, t);
            let x1 = axpy(x, &k1, dt);
            let u1 = spline.interpolate(t + dt);
            let k2 = rhs.eval(tape, &x1, &u1, t + dt);
            x.iter()
                .zip(k1.iter().zip(&k2))
                .map(|(&xi, (&a, &b))| xi + (a + b) * (dt / 2.0))
                .collect()
        }
        IntegratorKind::Midpoint => {
            let u0 = spline.interpolate(t);
            let k1 = rhs.eval(tape, x, &u0, t);
            let xm = axpy(x, &k1, dt / 2.0);
            let um = spline.interpolate(t + dt / 2.0);
            let k2 = rhs.eval(tape, &xm, &um, t + dt / 2.0);
            axpy(x, &k2, dt)
        }
        IntegratorKind::Rk4 => {
            let u0 = spline.interpolate(t);
            let um = spline.interpolate(t + dt / 2.0);
            let u1 = spline.interpolate(t + dt);
            let k1 = rhs.eval(tape, x, &u0, t);
            let x2 = axpy(x, &k1, dt / 2.0);
            let k2 = rhs.eval(tape, &x2, &um, t + dt / 2.0);
            let x3 = axpy(x, &k2, dt / 2.0);
            let k3 = rhs.eval(tape, &x3, &um, t + dt / 2.0);
            let x4 = axpy(x, &k3, dt);
            let k4 = rhs.eval(tape, &x4, &u1, t + dt);
            x.iter()
                .zip(k1.iter().zip(k2.iter().zip(k3.iter().zip(&k4))))
                .map(|(&xi, (&a, (&b, (&c, &d))))| xi + (a + (b + c) * 2.0 + d) * (dt / 6.0))
                .collect()
        }
    }
}

/// One explicit step at numeric state; returns the advanced state or a
/// blow-up error if it left the finite range.
pub fn step(
    kind: IntegratorKind,
    rhs: &dyn OdeRhs,
    x: &[f64],
    spline: &ControlSpline,
    t: f64,
    dt: f64,
) -> Result<Vec<f64>, IntegrateError> {
    if dt <= 0.0 {
        return Err(IntegrateError::Invalid("dt must be positive"));
    }
    let tape = Tape::new();
    let xv = tape.vars(x);
    let node_vars: Vec<Vec<Var<'_>>> = spline.nodes.iter_rows().map(|row| tape.vars(row)).collect();
    let sv = SplineVars {
        nodes: &node_vars,
        times: &spline.times,
        scheme: spline.scheme,
    };
    let out = step_vars(kind, rhs, &tape, &xv, &sv, t, dt);
    let vals: Vec<f64> = out.into_iter().map(|v| v.value()).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(IntegrateError::Blowup { t: t + dt });
    }
    Ok(vals)
}

/// Tape-level rollout of an augmented system over a uniform grid. Returns
/// the state nodes (including the start) and the accumulated-cost variable.
/// The cost coordinate rides as the final entry of each state vector.
pub(crate) fn rollout_vars<'t>(
    kind: IntegratorKind,
    rhs: &AugmentedDynamics,
    tape: &'t Tape,
    x0_aug: &[Var<'t>],
    spline: &SplineVars<'_, 't>,
    t0: f64,
    dt: f64,
    n_steps: usize,
) -> (Vec<Vec<Var<'t>>>, Var<'t>) {
    let mut nodes = Vec::with_capacity(n_steps + 1);
    nodes.push(x0_aug.to_vec());
    let mut x = x0_aug.to_vec();
    for s in 0..n_steps {
        let t = t0 + dt * s as f64;
        x = step_vars(kind, rhs, tape, &x, spline, t, dt);
        nodes.push(x.clone());
    }
    let cost = *x.last().expect("augmented state is non-empty");
    (nodes, cost)
}

/// Integrate the cost-augmented system from the start state over a uniform
/// grid of `n_steps` steps. Returns the trajectory on the grid and the total
/// cost (integrated running cost plus terminal cost, if any).
pub fn rollout(
    kind: IntegratorKind,
    sys: &ControlSystem,
    spline: &ControlSpline,
    n_steps: usize,
) -> Result<(Trajectory, f64), IntegrateError> {
    rollout_from(kind, sys, &sys.x_start.clone(), spline, n_steps)
}

/// [`rollout`] from an explicit start state (free-start experiments replace
/// coordinates of `x_start`).
pub fn rollout_from(
    kind: IntegratorKind,
    sys: &ControlSystem,
    x_start: &[f64],
    spline: &ControlSpline,
    n_steps: usize,
) -> Result<(Trajectory, f64), IntegrateError> {
    if n_steps == 0 {
        return Err(IntegrateError::Invalid("n_steps must be >= 1"));
    }
    if spline.control_dim() != sys.control_dim {
        return Err(IntegrateError::Invalid("spline control dimension mismatch"));
    }
    let aug = augment_dynamics(sys);
    let tape = Tape::new();
    let mut x0: Vec<Var<'_>> = x_start.iter().map(|&v| tape.constant(v)).collect();
    x0.push(tape.constant(0.0));
    let node_vars: Vec<Vec<Var<'_>>> = spline.nodes.iter_rows().map(|row| tape.vars(row)).collect();
    let sv = SplineVars {
        nodes: &node_vars,
        times: &spline.times,
        scheme: spline.scheme,
    };
    let dt = (sys.t_final - sys.t_start) / n_steps as f64;
    let (nodes, cost) = rollout_vars(kind, &aug, &tape, &x0, &sv, sys.t_start, dt, n_steps);

    let d = sys.state_dim;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Mat::zeros(n_steps + 1, d);
    let mut controls = Mat::zeros(n_steps + 1, sys.control_dim);
    for (i, node) in nodes.iter().enumerate() {
        let t = if i == n_steps {
            sys.t_final
        } else {
            sys.t_start + dt * i as f64
        };
        times.push(t);
        for j in 0..d {
            let v = node[j].value();
            if !v.is_finite() {
                return Err(IntegrateError::Blowup { t });
            }
            states[(i, j)] = v;
        }
        for (j, uj) in spline.interpolate(t).into_iter().enumerate() {
            controls[(i, j)] = uj;
        }
    }
    let mut total = cost.value();
    if let Some(tc) = &sys.terminal_cost {
        let xf = &nodes[n_steps][..d];
        total += tc.eval(&tape, xf).value();
    }
    if !total.is_finite() {
        return Err(IntegrateError::Blowup { t: sys.t_final });
    }
    let traj = Trajectory::new(times, states, controls)
        .map_err(|_| IntegrateError::Invalid("rollout produced an inconsistent grid"))?;
    Ok((traj, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::ad;
    use crate::systems::make_system;
    use alloc::collections::BTreeMap;
    use approx::assert_relative_eq;

    struct ExpGrowth;
    impl Dynamics for ExpGrowth {
        fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], _u: &[Var<'t>]) -> Vec<Var<'t>> {
            vec![x[0]]
        }
    }

    fn empty_spline(t0: f64, t1: f64) -> ControlSpline {
        ControlSpline::uniform(Mat::zeros(2, 0), t0, t1, InterpScheme::PiecewiseConstant).unwrap()
    }

    #[test]
    fn stage_counts() {
        assert_eq!(IntegratorKind::Euler.stages(), 1);
        assert_eq!(IntegratorKind::Heun.stages(), 2);
        assert_eq!(IntegratorKind::Midpoint.stages(), 2);
        assert_eq!(IntegratorKind::Rk4.stages(), 4);
    }

    #[test]
    fn interpolate_linear_and_constant() {
        let nodes = Mat::from_vec(2, 1, vec![0.0, 2.0]);
        let lin =
            ControlSpline::uniform(nodes.clone(), 0.0, 1.0, InterpScheme::PiecewiseLinear).unwrap();
        assert_eq!(lin.interpolate(0.5), vec![1.0]);
        let con = ControlSpline::uniform(nodes, 0.0, 1.0, InterpScheme::PiecewiseConstant).unwrap();
        assert_eq!(con.interpolate(0.5), vec![0.0]);
    }

    #[test]
    fn interpolation_reproduces_nodes_exactly() {
        let nodes = Mat::from_vec(4, 1, vec![0.3, -1.7, 2.9, 0.01]);
        for scheme in [InterpScheme::PiecewiseConstant, InterpScheme::PiecewiseLinear] {
            let sp = ControlSpline::uniform(nodes.clone(), 0.0, 3.0, scheme).unwrap();
            for (k, &t) in sp.times.clone().iter().enumerate() {
                assert_eq!(sp.interpolate(t), vec![nodes[(k, 0)]]);
            }
        }
    }

    #[test]
    fn interpolation_clamps_out_of_range() {
        let nodes = Mat::from_vec(2, 1, vec![1.0, 5.0]);
        let sp = ControlSpline::uniform(nodes, 0.0, 1.0, InterpScheme::PiecewiseLinear).unwrap();
        assert_eq!(sp.interpolate(-3.0), vec![1.0]);
        assert_eq!(sp.interpolate(7.0), vec![5.0]);
    }

    #[test]
    fn euler_step_exponential() {
        let rhs = Autonomous(Arc::new(ExpGrowth));
        let sp = empty_spline(0.0, 1.0);
        let x = step(IntegratorKind::Euler, &rhs, &[1.0], &sp, 0.0, 0.1).unwrap();
        assert_relative_eq!(x[0], 1.1, max_relative = 1e-15);
    }

    #[test]
    fn heun_step_exponential() {
        let rhs = Autonomous(Arc::new(ExpGrowth));
        let sp = empty_spline(0.0, 1.0);
        let x = step(IntegratorKind::Heun, &rhs, &[1.0], &sp, 0.0, 0.1).unwrap();
        // 1 + 0.1*(1 + 1.1)/2
        assert_relative_eq!(x[0], 1.105, max_relative = 1e-15);
    }

    #[test]
    fn rk4_step_matches_exponential() {
        let rhs = Autonomous(Arc::new(ExpGrowth));
        let sp = empty_spline(0.0, 1.0);
        let x = step(IntegratorKind::Rk4, &rhs, &[1.0], &sp, 0.0, 0.1).unwrap();
        assert_relative_eq!(x[0], crate::math::exp(0.1), max_relative = 1e-6);
    }

    #[test]
    fn convergence_orders() {
        // global error on x' = x over [0,1] vs analytic e; log2 slope between
        // successive halvings of dt.
        let rhs = Autonomous(Arc::new(ExpGrowth));
        let sp = empty_spline(0.0, 1.0);
        let expected = [
            (IntegratorKind::Euler, 1.0, 0.2),
            (IntegratorKind::Heun, 2.0, 0.2),
            (IntegratorKind::Midpoint, 2.0, 0.2),
            (IntegratorKind::Rk4, 4.0, 0.3),
        ];
        for (kind, order, tol) in expected {
            let mut errs = Vec::new();
            for steps in [10usize, 20, 40, 80] {
                let dt = 1.0 / steps as f64;
                let mut x = vec![1.0];
                for s in 0..steps {
                    x = step(kind, &rhs, &x, &sp, s as f64 * dt, dt).unwrap();
                }
                errs.push((x[0] - crate::math::exp(1.0)).abs());
            }
            for w in errs.windows(2) {
                let slope = (w[0] / w[1]).log2();
                assert!(
                    (slope - order).abs() <= tol,
                    "{}: slope {slope} not within {tol} of {order}",
                    kind.name()
                );
            }
        }
    }

    #[test]
    fn rollout_null_system_stays_put() {
        struct Still;
        impl Dynamics for Still {
            fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], _u: &[Var<'t>]) -> Vec<Var<'t>> {
                x.iter().map(|_| tape.constant(0.0)).collect()
            }
        }
        let sys = ControlSystem::new(
            "still",
            2,
            1,
            Arc::new(Still),
            Arc::new(crate::systems::ZeroCost),
            (0.0, 1.0),
            vec![3.0, -1.0],
        )
        .unwrap();
        let sp = ControlSpline::uniform(
            Mat::from_vec(2, 1, vec![0.7, -0.4]),
            0.0,
            1.0,
            InterpScheme::PiecewiseLinear,
        )
        .unwrap();
        let (traj, cost) = rollout(IntegratorKind::Rk4, &sys, &sp, 8).unwrap();
        assert_eq!(cost, 0.0);
        for row in traj.states.iter_rows() {
            assert_eq!(row, &[3.0, -1.0]);
        }
    }

    #[test]
    fn rollout_projectile_hits_analytic_kinematics() {
        // v0 = (100 + 0.5 g T^2)/T = 491.5; altitude(T) = 100 exactly
        // (RK4 is exact for polynomial solutions of degree <= 4).
        let sys = make_system("projectile", &BTreeMap::new()).unwrap();
        let sp =
            ControlSpline::uniform(Mat::zeros(2, 0), 0.0, 100.0, InterpScheme::PiecewiseLinear)
                .unwrap();
        let (traj, _) = rollout_from(IntegratorKind::Rk4, &sys, &[0.0, 491.5], &sp, 100).unwrap();
        assert_relative_eq!(traj.final_state()[0], 100.0, epsilon = 1e-6);
    }

    #[test]
    fn rollout_mould_uncontrolled_matches_closed_form() {
        // x' = r (m - x), x(0) = 1  =>  x(t) = m + (1 - m) e^{-r t}
        let sys = make_system("mould-fungicide", &BTreeMap::new()).unwrap();
        let sp = ControlSpline::uniform(Mat::zeros(2, 1), 0.0, 5.0, InterpScheme::PiecewiseLinear)
            .unwrap();
        let (traj, _) = rollout(IntegratorKind::Rk4, &sys, &sp, 50).unwrap();
        for (i, &t) in traj.times.iter().enumerate() {
            let exact = 10.0 + (1.0 - 10.0) * crate::math::exp(-0.3 * t);
            assert_relative_eq!(traj.states[(i, 0)], exact, max_relative = 1e-8);
        }
    }

    #[test]
    fn rollout_doubling_steps_is_rk4_consistent() {
        // Richardson check: successive halvings of dt shrink the endpoint
        // change by ~2^4 for a 4th-order scheme.
        let sys = make_system("van-der-pol", &BTreeMap::new()).unwrap();
        let nodes = Mat::from_vec(11, 1, (0..11).map(|i| 0.5 - 0.08 * i as f64).collect());
        let sp = ControlSpline::uniform(nodes, 0.0, 10.0, InterpScheme::PiecewiseLinear).unwrap();
        let (t1, _) = rollout(IntegratorKind::Rk4, &sys, &sp, 100).unwrap();
        let (t2, _) = rollout(IntegratorKind::Rk4, &sys, &sp, 200).unwrap();
        let (t3, _) = rollout(IntegratorKind::Rk4, &sys, &sp, 400).unwrap();
        let d12 = (t1.final_state()[0] - t2.final_state()[0]).abs();
        let d23 = (t2.final_state()[0] - t3.final_state()[0]).abs();
        let ratio = d12 / d23;
        assert!(
            (8.0..48.0).contains(&ratio),
            "refinement ratio {ratio} not ~16 (d12={d12:.3e}, d23={d23:.3e})"
        );
    }

    #[test]
    fn rollout_blowup_is_reported() {
        struct Quadratic;
        impl Dynamics for Quadratic {
            fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], _u: &[Var<'t>]) -> Vec<Var<'t>> {
                vec![x[0] * x[0]]
            }
        }
        let sys = ControlSystem::new(
            "blowup",
            1,
            0,
            Arc::new(Quadratic),
            Arc::new(crate::systems::ZeroCost),
            (0.0, 5.0),
            vec![1.0],
        )
        .unwrap();
        let sp = empty_spline(0.0, 5.0);
        // x' = x^2 from 1 escapes in finite time
        let err = rollout(IntegratorKind::Euler, &sys, &sp, 2000).unwrap_err();
        assert!(matches!(err, IntegrateError::Blowup { .. }));
    }

    #[test]
    fn rollout_cost_gradient_matches_finite_differences() {
        // Van der Pol, N = 10 control nodes: d(total cost)/d(nodes) via the
        // tape vs central differences.
        let sys = make_system("van-der-pol", &BTreeMap::new()).unwrap();
        let aug = augment_dynamics(&sys);
        let n_nodes = 11;
        let times: Vec<f64> = (0..n_nodes).map(|i| i as f64).collect();
        let n_steps = 30;
        let dt = 10.0 / n_steps as f64;
        let f = ad::scalar_fn(move |tape: &Tape, xs: &[Var<'_>]| {
            let nodes: Vec<Vec<Var<'_>>> = xs.chunks(1).map(|c| c.to_vec()).collect();
            let sv = SplineVars {
                nodes: &nodes,
                times: &times,
                scheme: InterpScheme::PiecewiseLinear,
            };
            let mut x0: Vec<Var<'_>> = [1.0, 0.0].iter().map(|&v| tape.constant(v)).collect();
            x0.push(tape.constant(0.0));
            let (_, cost) =
                rollout_vars(IntegratorKind::Rk4, &aug, tape, &x0, &sv, 0.0, dt, n_steps);
            cost
        });
        let u0: Vec<f64> = (0..n_nodes).map(|i| 0.3 - 0.05 * i as f64).collect();
        let (_, g) = ad::gradient(&f, &u0).unwrap();
        let fd = ad::fd_gradient(&f, &u0, 1e-6);
        for i in 0..n_nodes {
            let denom = fd[i].abs().max(1.0);
            assert!(
                (g[i] - fd[i]).abs() / denom < 1e-4,
                "node {i}: ad {} vs fd {}",
                g[i],
                fd[i]
            );
        }
    }
}
