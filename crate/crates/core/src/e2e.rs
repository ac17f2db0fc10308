//! End-to-end learning and control: train the dynamics model by
//! differentiating an outer imitation loss through the planner itself.
//!
//! The planning problem is a [`ParametrizedNlp`] whose objective and
//! constraints depend on both the decision vector `y` and the model
//! parameters `θ`. The inner solver takes a few extragradient (or
//! descent-ascent) steps per outer iteration, recorded on one tape so the
//! partial solution `z = [y, λ]` stays differentiable in `θ`
//! ([`inner_solve_unrolled`]). Warm starts persist across outer iterations
//! and are reset periodically so stale solutions of long-forgotten dynamics
//! don't linger. The implicit-function-theorem sensitivity
//! ([`ift_gradient`]) is the comparison path: exact at a stationary point,
//! but it demands one, which is precisely what the unrolled solver avoids.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::ad::{AdError, Recording, Tape, Var};
use crate::integrate::{
    rollout, ControlSpline, IntegrateError, IntegratorKind, InterpScheme, SplineVars,
};
use crate::linalg::{lu_solve, inf_norm, LinalgError, Mat};
use crate::solve::Method;
use crate::sysid::{mlp_forward_vars, MlpParams, MlpShape};
use crate::systems::{ControlSystem, StageCost, TerminalCost, Trajectory};
use crate::transcribe::{DecisionLayout, NlpProblem, TranscribeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum E2eError {
    #[error("inner iterate exceeded the divergence ceiling at step {step}")]
    Diverged { step: usize },
    #[error("stationarity precondition violated: |grad_z L| = {residual:.3e} > {threshold:.3e}")]
    StationarityViolated { residual: f64, threshold: f64 },
    #[error("singular KKT system in the implicit-function solve: {0}")]
    SingularKkt(LinalgError),
    #[error("autodiff failure: {0}")]
    Ad(#[from] AdError),
    #[error("integration failed: {0}")]
    Integrate(#[from] IntegrateError),
    #[error("transcription failed: {0}")]
    Transcribe(#[from] TranscribeError),
    #[error("{0}")]
    BadConfig(&'static str),
}

// ---------------------------------------------------------------------------
// Parametrized NLPs.
// ---------------------------------------------------------------------------

/// Scalar function of decision variables and model parameters.
pub trait ParamScalarField: Send + Sync {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>], theta: &[Var<'t>]) -> Var<'t>;
}

/// Vector function of decision variables and model parameters.
pub trait ParamVectorField: Send + Sync {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>], theta: &[Var<'t>]) -> Vec<Var<'t>>;
}

impl<F> ParamScalarField for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[Var<'t>]) -> Var<'t> + Send + Sync,
{
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>], theta: &[Var<'t>]) -> Var<'t> {
        self(tape, y, theta)
    }
}

impl<F> ParamVectorField for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[Var<'t>]) -> Vec<Var<'t>> + Send + Sync,
{
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>], theta: &[Var<'t>]) -> Vec<Var<'t>> {
        self(tape, y, theta)
    }
}

/// Identity helper pinning a closure to the [`ParamScalarField`] signature.
pub fn param_scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[Var<'t>]) -> Var<'t>,
{
    f
}

/// Identity helper pinning a closure to the [`ParamVectorField`] signature.
pub fn param_vector_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[Var<'t>]) -> Vec<Var<'t>>,
{
    f
}

/// An NLP whose objective and equality constraints are parametrized by the
/// dynamics-model parameters; fixing `θ` yields an ordinary [`NlpProblem`].
#[derive(Clone)]
pub struct ParametrizedNlp {
    pub objective: Arc<dyn ParamScalarField>,
    pub constraints: Arc<dyn ParamVectorField>,
    pub n_constraints: usize,
    pub n_theta: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub y0_guess: Vec<f64>,
    pub layout: DecisionLayout,
    pub state_times: Vec<f64>,
    pub control_times: Vec<f64>,
}

struct FixedThetaObjective {
    inner: Arc<dyn ParamScalarField>,
    theta: Vec<f64>,
}

impl crate::ad::ScalarField for FixedThetaObjective {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>]) -> Var<'t> {
        let tv: Vec<Var<'t>> = self.theta.iter().map(|&v| tape.constant(v)).collect();
        self.inner.eval(tape, y, &tv)
    }
}

struct FixedThetaConstraints {
    inner: Arc<dyn ParamVectorField>,
    theta: Vec<f64>,
}

impl crate::ad::VectorField for FixedThetaConstraints {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>]) -> Vec<Var<'t>> {
        let tv: Vec<Var<'t>> = self.theta.iter().map(|&v| tape.constant(v)).collect();
        self.inner.eval(tape, y, &tv)
    }
}

impl ParametrizedNlp {
    pub fn n_decision(&self) -> usize {
        self.y0_guess.len()
    }

    /// Freeze the parameters into constants, yielding a plain NLP.
    pub fn fix_theta(&self, theta: &[f64]) -> NlpProblem {
        assert_eq!(theta.len(), self.n_theta, "theta arity mismatch");
        NlpProblem {
            objective: Arc::new(FixedThetaObjective {
                inner: Arc::clone(&self.objective),
                theta: theta.to_vec(),
            }),
            constraints: Arc::new(FixedThetaConstraints {
                inner: Arc::clone(&self.constraints),
                theta: theta.to_vec(),
            }),
            n_constraints: self.n_constraints,
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            x0_guess: self.y0_guess.clone(),
            layout: self.layout.clone(),
            state_times: self.state_times.clone(),
            control_times: self.control_times.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Unrolled inner solve.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct UnrollConfig {
    pub k_steps: usize,
    pub eta_y: f64,
    pub eta_lambda: f64,
    pub method: Method,
    pub divergence_ceiling: f64,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        UnrollConfig {
            k_steps: 10,
            eta_y: 1e-2,
            eta_lambda: 1e-2,
            method: Method::Extragradient,
            divergence_ceiling: 1e8,
        }
    }
}

/// Cold-start iterate for a parametrized problem.
pub fn cold_state(p: &ParametrizedNlp) -> crate::solve::SolverState {
    crate::solve::SolverState {
        y: p.y0_guess.clone(),
        lambda: vec![0.0; p.n_constraints],
        iteration: 0,
    }
}

/// Run `k_steps` solver steps from `warm`, recording the whole unroll on one
/// tape so the final iterate is differentiable in `θ`. Returns the final
/// state and the accumulated sensitivity `dz/dθ` (rows ordered `y` then
/// `λ`). The warm-start iterate is treated as data, not differentiated.
pub fn inner_solve_unrolled(
    p: &ParametrizedNlp,
    theta: &[f64],
    warm: &crate::solve::SolverState,
    cfg: &UnrollConfig,
) -> Result<(crate::solve::SolverState, Mat), E2eError> {
    if cfg.k_steps == 0 {
        return Err(E2eError::BadConfig("k_steps must be >= 1"));
    }
    let n = p.n_decision();
    let m = p.n_constraints;
    assert_eq!(theta.len(), p.n_theta, "theta arity mismatch");
    assert_eq!(warm.y.len(), n, "warm start arity mismatch");
    assert_eq!(warm.lambda.len(), m, "warm multiplier arity mismatch");

    // Record L(y, λ, θ) once on a scratch tape.
    let objective = Arc::clone(&p.objective);
    let constraints = Arc::clone(&p.constraints);
    let mut point = Vec::with_capacity(n + m + p.n_theta);
    point.extend_from_slice(&warm.y);
    point.extend_from_slice(&warm.lambda);
    point.extend_from_slice(theta);
    let rec = Recording::record(
        move |tape, inputs| {
            let y = &inputs[..n];
            let lam = &inputs[n..n + m];
            let th = &inputs[n + m..];
            let f = objective.eval(tape, y, th);
            let h = constraints.eval(tape, y, th);
            let mut l = f;
            for (&li, &hi) in lam.iter().zip(&h) {
                l = l + li * hi;
            }
            vec![l]
        },
        &point,
    )?;

    let host = Tape::new();
    let theta_vars: Vec<Var<'_>> = theta.iter().map(|&v| host.var(v)).collect();
    let mut y: Vec<Var<'_>> = warm.y.iter().map(|&v| host.constant(v)).collect();
    let mut lam: Vec<Var<'_>> = warm.lambda.iter().map(|&v| host.constant(v)).collect();

    // ∇L with respect to [y, λ, θ] as host expressions; ∂L/∂λ is h itself.
    fn grad_at<'h>(
        rec: &Recording,
        host: &'h Tape,
        y: &[Var<'h>],
        lam: &[Var<'h>],
        theta: &[Var<'h>],
    ) -> Vec<Var<'h>> {
        let mut subs = Vec::with_capacity(y.len() + lam.len() + theta.len());
        subs.extend_from_slice(y);
        subs.extend_from_slice(lam);
        subs.extend_from_slice(theta);
        rec.gradient_graph(0, host, &subs)
    }
    fn step_y<'h>(
        y: &[Var<'h>],
        g: &[Var<'h>],
        eta: f64,
        lower: &[f64],
        upper: &[f64],
    ) -> Vec<Var<'h>> {
        y.iter()
            .zip(g)
            .zip(lower.iter().zip(upper))
            .map(|((&v, &gi), (&lo, &hi))| (v - gi * eta).clamp(lo, hi))
            .collect()
    }
    fn step_lam<'h>(lam: &[Var<'h>], h: &[Var<'h>], eta: f64) -> Vec<Var<'h>> {
        lam.iter().zip(h).map(|(&l, &hi)| l + hi * eta).collect()
    }

    for step in 0..cfg.k_steps {
        let g = grad_at(&rec, &host, &y, &lam, &theta_vars);
        match cfg.method {
            Method::Gda => {
                let y_next = step_y(&y, &g[..n], cfg.eta_y, &p.lower, &p.upper);
                let lam_next = step_lam(&lam, &g[n..n + m], cfg.eta_lambda);
                y = y_next;
                lam = lam_next;
            }
            Method::Extragradient => {
                let y_bar = step_y(&y, &g[..n], cfg.eta_y, &p.lower, &p.upper);
                let lam_bar = step_lam(&lam, &g[n..n + m], cfg.eta_lambda);
                let g_bar = grad_at(&rec, &host, &y_bar, &lam_bar, &theta_vars);
                let y_next = step_y(&y, &g_bar[..n], cfg.eta_y, &p.lower, &p.upper);
                let lam_next = step_lam(&lam, &g_bar[n..n + m], cfg.eta_lambda);
                y = y_next;
                lam = lam_next;
            }
        }
        let worst = y
            .iter()
            .chain(&lam)
            .fold(0.0f64, |w, v| w.max(v.value().abs()));
        if !worst.is_finite() || worst > cfg.divergence_ceiling {
            return Err(E2eError::Diverged { step });
        }
    }

    let mut sensitivity = Mat::zeros(n + m, p.n_theta);
    for (row, v) in y.iter().chain(&lam).enumerate() {
        let adj = host.backward(*v);
        for (col, tv) in theta_vars.iter().enumerate() {
            sensitivity[(row, col)] = adj.wrt(*tv);
        }
    }
    let state = crate::solve::SolverState {
        y: y.iter().map(|v| v.value()).collect(),
        lambda: lam.iter().map(|v| v.value()).collect(),
        iteration: warm.iteration + cfg.k_steps,
    };
    Ok((state, sensitivity))
}

// ---------------------------------------------------------------------------
// Implicit-function-theorem sensitivity.
// ---------------------------------------------------------------------------

/// Solution sensitivity `dz/dθ` at a stationary point `z*` of the
/// Lagrangian, from the dense linear system of the implicit function
/// theorem: `(∇²_zz L) dz/dθ = -(∇²_zθ L)`. Errors if the stationarity
/// residual exceeds `stationarity_tol` (the theorem's hypothesis) or the
/// second-derivative block is singular.
pub fn ift_gradient(
    p: &ParametrizedNlp,
    theta: &[f64],
    z_star: &crate::solve::SolverState,
    stationarity_tol: f64,
) -> Result<Mat, E2eError> {
    let n = p.n_decision();
    let m = p.n_constraints;
    let nz = n + m;
    assert_eq!(theta.len(), p.n_theta, "theta arity mismatch");

    let objective = Arc::clone(&p.objective);
    let constraints = Arc::clone(&p.constraints);
    let mut point = Vec::with_capacity(nz + p.n_theta);
    point.extend_from_slice(&z_star.y);
    point.extend_from_slice(&z_star.lambda);
    point.extend_from_slice(theta);
    let rec = Recording::record(
        move |tape, inputs| {
            let y = &inputs[..n];
            let lam = &inputs[n..n + m];
            let th = &inputs[n + m..];
            let f = objective.eval(tape, y, th);
            let h = constraints.eval(tape, y, th);
            let mut l = f;
            for (&li, &hi) in lam.iter().zip(&h) {
                l = l + li * hi;
            }
            vec![l]
        },
        &point,
    )?;

    let host = Tape::new();
    let inputs: Vec<Var<'_>> = point.iter().map(|&v| host.var(v)).collect();
    let g = rec.gradient_graph(0, &host, &inputs);
    let residual = g[..nz]
        .iter()
        .fold(0.0f64, |w, v| w.max(v.value().abs()));
    if residual > stationarity_tol {
        return Err(E2eError::StationarityViolated {
            residual,
            threshold: stationarity_tol,
        });
    }

    let mut hess_zz = Mat::zeros(nz, nz);
    let mut rhs = Mat::zeros(nz, p.n_theta);
    for i in 0..nz {
        let adj = host.backward(g[i]);
        for j in 0..nz {
            hess_zz[(i, j)] = adj.wrt(inputs[j]);
        }
        for k in 0..p.n_theta {
            rhs[(i, k)] = -adj.wrt(inputs[nz + k]);
        }
    }
    lu_solve(hess_zz, &rhs).map_err(E2eError::SingularKkt)
}

// ---------------------------------------------------------------------------
// Neural planner construction.
// ---------------------------------------------------------------------------

/// Maps `(y, θ)` to the plan's state rows on the planner grid, for the
/// outer imitation loss.
pub trait PlanStates: Send + Sync {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>], theta: &[Var<'t>]) -> Vec<Vec<Var<'t>>>;
}

/// A parametrized planning problem bundled with its plan-state extractor
/// and the grid the plan states live on.
#[derive(Clone)]
pub struct E2eSetup {
    pub nlp: ParametrizedNlp,
    pub plan_states: Arc<dyn PlanStates>,
    pub plan_times: Vec<f64>,
    pub state_dim: usize,
    pub control_dim: usize,
}

/// RK4 rollout of the neural dynamics with controls and parameters as tape
/// variables, accumulating the stage cost; returns state rows (without the
/// cost coordinate) and the integrated cost.
#[allow(clippy::too_many_arguments)]
fn neural_rollout<'t>(
    tape: &'t Tape,
    shape: &MlpShape,
    theta: &[Var<'t>],
    cost: &dyn StageCost,
    x0: &[Var<'t>],
    spline: &SplineVars<'_, 't>,
    t0: f64,
    dt: f64,
    n_steps: usize,
) -> (Vec<Vec<Var<'t>>>, Var<'t>) {
    let d = shape.output;
    let eval = |x: &[Var<'t>], c: Var<'t>, t: f64| -> (Vec<Var<'t>>, Var<'t>) {
        let u = spline.interpolate(t);
        let mut input = Vec::with_capacity(shape.input);
        input.extend_from_slice(x);
        input.extend_from_slice(&u);
        let dx = mlp_forward_vars(shape, theta, &input, tape);
        let dc = cost.eval(tape, x, &u, t);
        let _ = c;
        (dx, dc)
    };
    let axpy = |x: &[Var<'t>], k: &[Var<'t>], h: f64| -> Vec<Var<'t>> {
        x.iter().zip(k).map(|(&a, &b)| a + b * h).collect()
    };
    let mut rows = Vec::with_capacity(n_steps + 1);
    rows.push(x0.to_vec());
    let mut x = x0.to_vec();
    let mut c = tape.constant(0.0);
    for s in 0..n_steps {
        let t = t0 + dt * s as f64;
        let (k1, c1) = eval(&x, c, t);
        let x2 = axpy(&x, &k1, dt / 2.0);
        let (k2, c2) = eval(&x2, c, t + dt / 2.0);
        let x3 = axpy(&x, &k2, dt / 2.0);
        let (k3, c3) = eval(&x3, c, t + dt / 2.0);
        let x4 = axpy(&x, &k3, dt);
        let (k4, c4) = eval(&x4, c, t + dt);
        x = (0..d)
            .map(|j| x[j] + (k1[j] + (k2[j] + k3[j]) * 2.0 + k4[j]) * (dt / 6.0))
            .collect();
        c = c + (c1 + (c2 + c3) * 2.0 + c4) * (dt / 6.0);
        rows.push(x.clone());
    }
    (rows, c)
}

struct NeuralShooting {
    shape: MlpShape,
    cost: Arc<dyn StageCost>,
    terminal_cost: Option<Arc<dyn TerminalCost>>,
    x_start: Vec<f64>,
    x_final: Option<Vec<Option<f64>>>,
    control_times: Vec<f64>,
    scheme: InterpScheme,
    layout: DecisionLayout,
    t_start: f64,
    dt: f64,
    n_steps: usize,
}

impl NeuralShooting {
    fn rollout<'t>(
        &self,
        tape: &'t Tape,
        y: &[Var<'t>],
        theta: &[Var<'t>],
    ) -> (Vec<Vec<Var<'t>>>, Var<'t>) {
        let (_, _, u_nodes) = split_decision(&self.layout, y);
        let sv = SplineVars {
            nodes: &u_nodes,
            times: &self.control_times,
            scheme: self.scheme,
        };
        let x0: Vec<Var<'t>> = self.x_start.iter().map(|&v| tape.constant(v)).collect();
        neural_rollout(
            tape,
            &self.shape,
            theta,
            self.cost.as_ref(),
            &x0,
            &sv,
            self.t_start,
            self.dt,
            self.n_steps,
        )
    }
}

fn split_decision<'y, 't>(
    layout: &DecisionLayout,
    y: &'y [Var<'t>],
) -> (&'y [Var<'t>], Vec<Vec<Var<'t>>>, Vec<Vec<Var<'t>>>) {
    let free = &y[..layout.n_free_start];
    let sb = layout.n_free_start;
    let states = (0..layout.n_state_nodes)
        .map(|i| {
            let b = sb + i * layout.state_dim;
            y[b..b + layout.state_dim].to_vec()
        })
        .collect();
    let cb = sb + layout.n_state_nodes * layout.state_dim;
    let controls = (0..layout.n_control_nodes)
        .map(|i| {
            let b = cb + i * layout.control_dim;
            y[b..b + layout.control_dim].to_vec()
        })
        .collect();
    (free, states, controls)
}

struct NeuralSsObjective(Arc<NeuralShooting>);

impl ParamScalarField for NeuralSsObjective {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>], theta: &[Var<'t>]) -> Var<'t> {
        let (rows, cost) = self.0.rollout(tape, y, theta);
        match &self.0.terminal_cost {
            Some(tc) => cost + tc.eval(tape, rows.last().expect("rollout nonempty")),
            None => cost,
        }
    }
}

struct NeuralSsConstraints(Arc<NeuralShooting>);

impl ParamVectorField for NeuralSsConstraints {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>], theta: &[Var<'t>]) -> Vec<Var<'t>> {
        let (rows, _) = self.0.rollout(tape, y, theta);
        let xf = rows.last().expect("rollout nonempty");
        let mut out = Vec::new();
        if let Some(pins) = &self.0.x_final {
            for (d, pin) in pins.iter().enumerate() {
                if let Some(target) = pin {
                    out.push(xf[d] - *target);
                }
            }
        }
        out
    }
}

struct NeuralSsPlanStates(Arc<NeuralShooting>);

impl PlanStates for NeuralSsPlanStates {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>], theta: &[Var<'t>]) -> Vec<Vec<Var<'t>>> {
        self.0.rollout(tape, y, theta).0
    }
}

/// Single-shooting planner over a neural dynamics model. The template
/// system supplies everything except the dynamics: cost, horizon, start
/// state, terminal pins, and bounds. Plan states are the predicted rollout
/// of the model on the integration grid.
pub fn neural_single_shooting(
    template: &ControlSystem,
    hidden: Vec<usize>,
    n_controls: usize,
    steps_per_interval: usize,
) -> Result<E2eSetup, E2eError> {
    if n_controls < 2 || steps_per_interval == 0 {
        return Err(E2eError::BadConfig(
            "need n_controls >= 2 and steps_per_interval >= 1",
        ));
    }
    if !template.free_start.is_empty() {
        return Err(E2eError::BadConfig(
            "free start coordinates are not supported by the neural planner",
        ));
    }
    let shape = MlpShape::new(template.state_dim, template.control_dim, hidden);
    let layout = DecisionLayout {
        n_free_start: 0,
        n_state_nodes: 0,
        state_dim: template.state_dim,
        n_control_nodes: n_controls,
        control_dim: template.control_dim,
    };
    let control_times: Vec<f64> = (0..n_controls)
        .map(|i| {
            template.t_start
                + (template.t_final - template.t_start) * i as f64 / (n_controls - 1) as f64
        })
        .collect();
    let n_steps = (n_controls - 1) * steps_per_interval;
    let dt = (template.t_final - template.t_start) / n_steps as f64;
    let plan_times: Vec<f64> = (0..=n_steps)
        .map(|i| {
            if i == n_steps {
                template.t_final
            } else {
                template.t_start + dt * i as f64
            }
        })
        .collect();

    let cb = template
        .control_bounds
        .clone()
        .unwrap_or_else(|| vec![(f64::NEG_INFINITY, f64::INFINITY); template.control_dim]);
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut guess = Vec::new();
    for _ in 0..n_controls {
        for &(lo, hi) in &cb {
            lower.push(lo);
            upper.push(hi);
            guess.push(if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                0.0
            });
        }
    }
    let n_pins = template
        .x_final
        .as_ref()
        .map_or(0, |xf| xf.iter().filter(|p| p.is_some()).count());

    let shared = Arc::new(NeuralShooting {
        shape: shape.clone(),
        cost: Arc::clone(&template.cost),
        terminal_cost: template.terminal_cost.clone(),
        x_start: template.x_start.clone(),
        x_final: template.x_final.clone(),
        control_times: control_times.clone(),
        scheme: InterpScheme::PiecewiseLinear,
        layout: layout.clone(),
        t_start: template.t_start,
        dt,
        n_steps,
    });
    Ok(E2eSetup {
        nlp: ParametrizedNlp {
            objective: Arc::new(NeuralSsObjective(Arc::clone(&shared))),
            constraints: Arc::new(NeuralSsConstraints(Arc::clone(&shared))),
            n_constraints: n_pins,
            n_theta: shape.n_params(),
            lower,
            upper,
            y0_guess: guess,
            layout,
            state_times: Vec::new(),
            control_times,
        },
        plan_states: Arc::new(NeuralSsPlanStates(shared)),
        plan_times,
        state_dim: template.state_dim,
        control_dim: template.control_dim,
    })
}

// ---------------------------------------------------------------------------
// End-to-end training loop.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterOptimizer {
    /// Momentum gradient descent (`outer_momentum` is the decay factor).
    Momentum,
    /// Adam with the usual (0.9, 0.999) moment decays.
    Adam,
}

#[derive(Debug, Clone)]
pub struct E2eConfig {
    pub k_steps: usize,
    pub reset_period: usize,
    pub outer_iters: usize,
    pub outer_lr: f64,
    /// Geometric per-iteration decay of the outer step (1.0 = constant).
    pub outer_lr_decay: f64,
    pub outer_momentum: f64,
    /// Outer update rule. The imitation losses develop long shallow
    /// valleys; the adaptive rule makes progress along them where plain
    /// momentum stalls.
    pub outer_optimizer: OuterOptimizer,
    pub eta_y: f64,
    pub eta_lambda: f64,
    pub seed: u64,
}

impl Default for E2eConfig {
    fn default() -> Self {
        E2eConfig {
            k_steps: 10,
            reset_period: 50,
            outer_iters: 200,
            outer_lr: 0.05,
            outer_lr_decay: 1.0,
            outer_momentum: 0.9,
            outer_optimizer: OuterOptimizer::Momentum,
            eta_y: 1e-2,
            eta_lambda: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct E2eHistory {
    pub outer_loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
    /// Extracted plan controls per outer iteration.
    pub controls: Vec<Mat>,
    /// Primal warm-start used at each outer iteration (cold after resets).
    pub warm_starts: Vec<Vec<f64>>,
    /// Outer iterations at which the warm start was reset.
    pub resets: Vec<usize>,
    pub divergences: usize,
    pub best_loss: f64,
    pub best_iteration: usize,
}

/// Outcome of [`e2e_train`]: best parameters, their plan controls, and the
/// full history.
pub struct E2eOutcome {
    pub params: MlpParams,
    pub controls: Mat,
    pub history: E2eHistory,
}

fn extract_controls(layout: &DecisionLayout, y: &[f64]) -> Mat {
    let base = layout.n_free_start + layout.n_state_nodes * layout.state_dim;
    Mat::from_vec(
        layout.n_control_nodes,
        layout.control_dim,
        y[base..].to_vec(),
    )
}

/// Alternate unrolled inner solves with outer gradient steps on the model
/// parameters. The outer loss is the trajectory-matching error between the
/// plan's states and the expert states on the plan grid; its gradient in
/// `θ` combines the chain-rule term through the solver iterates with the
/// direct dependence of the plan states on `θ`.
pub fn e2e_train(
    setup: &E2eSetup,
    expert_states: &Mat,
    hidden: Vec<usize>,
    cfg: &E2eConfig,
) -> Result<E2eOutcome, E2eError> {
    if cfg.outer_iters == 0 || cfg.reset_period == 0 {
        return Err(E2eError::BadConfig("outer_iters and reset_period must be >= 1"));
    }
    if expert_states.rows() != setup.plan_times.len() || expert_states.cols() != setup.state_dim {
        return Err(E2eError::BadConfig("expert states must live on the plan grid"));
    }
    let p = &setup.nlp;
    let n = p.n_decision();
    let m = p.n_constraints;
    let shape = MlpShape::new(setup.state_dim, setup.control_dim, hidden);
    if shape.n_params() != p.n_theta {
        return Err(E2eError::BadConfig("hidden widths disagree with the planner's parameter count"));
    }
    let mut params = MlpParams::init(shape, cfg.seed);
    let unroll = UnrollConfig {
        k_steps: cfg.k_steps,
        eta_y: cfg.eta_y,
        eta_lambda: cfg.eta_lambda,
        method: Method::Extragradient,
        divergence_ceiling: 1e8,
    };

    let mut warm = cold_state(p);
    let mut velocity = vec![0.0f64; p.n_theta];
    let mut adam_m = vec![0.0f64; p.n_theta];
    let mut adam_v = vec![0.0f64; p.n_theta];
    let mut adam_t = 0usize;
    let mut history = E2eHistory {
        best_loss: f64::INFINITY,
        ..E2eHistory::default()
    };
    let mut best_params = params.flat.clone();
    let mut best_controls = extract_controls(&p.layout, &warm.y);

    for outer in 0..cfg.outer_iters {
        if outer % cfg.reset_period == 0 {
            warm = cold_state(p);
            history.resets.push(outer);
        }
        history.warm_starts.push(warm.y.clone());
        let (z, dzdtheta) = match inner_solve_unrolled(p, &params.flat, &warm, &unroll) {
            Ok(out) => out,
            Err(E2eError::Diverged { .. }) => {
                warm = cold_state(p);
                history.divergences += 1;
                history.outer_loss.push(f64::NAN);
                history.grad_norm.push(f64::NAN);
                history.controls.push(extract_controls(&p.layout, &warm.y));
                continue;
            }
            Err(e) => return Err(e),
        };

        // Outer loss and its gradients with respect to (z, θ).
        let plan = Arc::clone(&setup.plan_states);
        let expert = expert_states.clone();
        let layout = p.layout.clone();
        let nz = n + m;
        let mut point = Vec::with_capacity(nz + p.n_theta);
        point.extend_from_slice(&z.y);
        point.extend_from_slice(&z.lambda);
        point.extend_from_slice(&params.flat);
        let rec = Recording::record(
            move |tape, inputs| {
                let y = &inputs[..n];
                let th = &inputs[nz..];
                let _ = &layout;
                let rows = plan.eval(tape, y, th);
                let steps = rows.len() - 1;
                let d = expert.cols();
                let mut sum = tape.constant(0.0);
                for (i, row) in rows.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        let e = v - expert[(i, j)];
                        sum = sum + e * e;
                    }
                }
                vec![sum / (steps * d) as f64]
            },
            &point,
        )?;
        let loss = rec.output(0);
        let g = rec.gradient(0);
        let dl_dz = &g[..nz];
        let dl_dtheta_direct = &g[nz..];

        // chain rule through the unrolled solver plus the direct term
        let mut grad = vec![0.0f64; p.n_theta];
        for (k, gk) in grad.iter_mut().enumerate() {
            let mut acc = dl_dtheta_direct[k];
            for (i, &dzi) in dl_dz.iter().enumerate() {
                acc += dzi * dzdtheta[(i, k)];
            }
            *gk = acc;
        }
        let gnorm = inf_norm(&grad);
        history.outer_loss.push(loss);
        history.grad_norm.push(gnorm);
        let controls = extract_controls(&p.layout, &z.y);
        history.controls.push(controls.clone());
        if loss < history.best_loss {
            history.best_loss = loss;
            history.best_iteration = outer;
            best_params.copy_from_slice(&params.flat);
            best_controls = controls;
        }

        let lr = cfg.outer_lr * crate::math::powf(cfg.outer_lr_decay, outer as f64);
        match cfg.outer_optimizer {
            OuterOptimizer::Momentum => {
                for ((v, pv), gk) in velocity.iter_mut().zip(&mut params.flat).zip(&grad) {
                    *v = cfg.outer_momentum * *v - lr * gk;
                    *pv += *v;
                }
            }
            OuterOptimizer::Adam => {
                adam_t += 1;
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                let bc1 = 1.0 - crate::math::powf(b1, adam_t as f64);
                let bc2 = 1.0 - crate::math::powf(b2, adam_t as f64);
                for ((mv, vv), (pv, gk)) in adam_m
                    .iter_mut()
                    .zip(&mut adam_v)
                    .zip(params.flat.iter_mut().zip(&grad))
                {
                    *mv = b1 * *mv + (1.0 - b1) * gk;
                    *vv = b2 * *vv + (1.0 - b2) * gk * gk;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= lr * mhat / (crate::math::sqrt(vhat) + eps);
                }
            }
        }
        warm = z;
    }

    params.flat = best_params;
    Ok(E2eOutcome {
        params,
        controls: best_controls,
        history,
    })
}

/// One snapshot of training progress: the plan at an outer iteration and
/// its rollout on the true system.
pub struct Snapshot {
    pub outer_iteration: usize,
    pub controls: Mat,
    pub states: Trajectory,
}

/// Sample every `stride`-th outer iterate's plan (the final iterate is
/// always included) and roll each out on the true system.
pub fn snapshot_controls(
    history: &E2eHistory,
    stride: usize,
    sys_true: &ControlSystem,
    control_times: &[f64],
    n_steps: usize,
) -> Result<Vec<Snapshot>, E2eError> {
    if stride == 0 {
        return Err(E2eError::BadConfig("stride must be >= 1"));
    }
    let total = history.controls.len();
    if total == 0 {
        return Ok(Vec::new());
    }
    // every stride-th iterate, and always the final one; a stride beyond
    // the history length degenerates to the final snapshot alone
    let mut picks: Vec<usize> = ((stride - 1)..total).step_by(stride).collect();
    if picks.last() != Some(&(total - 1)) {
        picks.push(total - 1);
    }
    let mut out = Vec::with_capacity(picks.len());
    for &i in &picks {
        let controls = history.controls[i].clone();
        let spline = ControlSpline::new(
            controls.clone(),
            control_times.to_vec(),
            InterpScheme::PiecewiseLinear,
        )?;
        let (traj, _) = rollout(IntegratorKind::Rk4, sys_true, &spline, n_steps)?;
        out.push(Snapshot {
            outer_iteration: i,
            controls,
            states: traj,
        });
    }
    Ok(out)
}
