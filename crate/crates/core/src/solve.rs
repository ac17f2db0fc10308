//! First-order solvers for the transcribed NLPs: gradient descent-ascent
//! and extragradient on the Lagrangian `L(y, λ) = f(y) + λᵀh(y)`, treating
//! the problem as the min-max game `min_y max_λ L`.
//!
//! Box bounds are honored either by projection (clipping after every primal
//! step) or by a sigmoid reparametrization that optimizes an unconstrained
//! variable mapped into the box.
//!
//! [`solve_nlp`] records the Lagrangian graph once and replays it every
//! iteration, so the per-iteration cost is one forward and one backward
//! sweep per gradient evaluation. Optional Ruiz equilibration of the
//! Jacobian/Hessian-diagonal structure and an objective scale factor
//! precondition badly scaled transcriptions; both transformations are
//! undone in the report, and convergence is always measured on the original
//! problem's KKT residuals.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::ad::{self, AdError, Recording, ScalarField, Tape, Var, VectorField};
use crate::linalg::inf_norm;
use crate::math;
use crate::transcribe::NlpProblem;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("iterate exceeded the divergence ceiling at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("non-finite gradient at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("autodiff failure: {0}")]
    Ad(#[from] AdError),
    #[error("{0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gda,
    Extragradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMode {
    Projection,
    Reparametrization,
}

/// Temperature schedule for the sigmoid reparametrization:
/// `alpha_k = initial * decay^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    pub initial: f64,
    pub decay: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            initial: 1.0,
            decay: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub eta_y: f64,
    pub eta_lambda: f64,
    pub max_iters: usize,
    pub tol_grad: f64,
    pub tol_constraint: f64,
    pub method: Method,
    pub bound_mode: BoundMode,
    pub alpha: AlphaSchedule,
    /// Multiplies the objective inside the Lagrangian; the minimizer is
    /// unchanged, the multipliers rescale. Dials the relative strength of
    /// descent and constraint enforcement on badly scaled problems.
    pub objective_scale: f64,
    /// Ruiz-equilibrate variables and constraint rows before iterating.
    pub equilibrate: bool,
    /// Geometric per-iteration step decay (1.0 keeps steps constant).
    pub eta_decay: f64,
    /// Max-norm ceiling on iterates; crossing it aborts with
    /// [`SolveError::Diverged`].
    pub divergence_ceiling: f64,
    /// Record the primal iterate (in problem coordinates) every this many
    /// iterations; 0 disables snapshots.
    pub snapshot_stride: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eta_y: 1e-2,
            eta_lambda: 1e-2,
            max_iters: 10_000,
            tol_grad: 1e-6,
            tol_constraint: 1e-6,
            method: Method::Extragradient,
            bound_mode: BoundMode::Projection,
            alpha: AlphaSchedule::default(),
            objective_scale: 1.0,
            equilibrate: false,
            eta_decay: 1.0,
            divergence_ceiling: 1e8,
            snapshot_stride: 0,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<(), SolveError> {
        if self.eta_y <= 0.0 || self.eta_lambda <= 0.0 {
            return Err(SolveError::BadConfig("step sizes must be positive"));
        }
        if self.tol_grad <= 0.0 || self.tol_constraint <= 0.0 {
            return Err(SolveError::BadConfig("tolerances must be positive"));
        }
        if self.objective_scale <= 0.0 {
            return Err(SolveError::BadConfig("objective_scale must be positive"));
        }
        Ok(())
    }
}

/// Primal-dual iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
    pub iteration: usize,
}

impl SolverState {
    pub fn cold(p: &NlpProblem) -> Self {
        SolverState {
            y: p.x0_guess.clone(),
            lambda: vec![0.0; p.n_constraints],
            iteration: 0,
        }
    }
}

/// One diagnostics row: objective, constraint violation, KKT residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub f: f64,
    pub h_inf: f64,
    pub grad_inf: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Final iterate in solver coordinates (scaled / unconstrained space).
    pub state: SolverState,
    /// Solution mapped back to problem coordinates.
    pub y: Vec<f64>,
    /// Multipliers of the original constraints (descaled).
    pub lambda: Vec<f64>,
    pub f: f64,
    pub h_inf: f64,
    pub grad_inf: f64,
    pub converged: bool,
    pub iterations: usize,
    pub diagnostics: Vec<IterRecord>,
    /// `(iteration, y)` snapshots in problem coordinates, when requested.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

/// `L(y, λ) = f(y) + λᵀ h(y)`.
pub fn lagrangian(p: &NlpProblem, y: &[f64], lambda: &[f64]) -> f64 {
    assert_eq!(lambda.len(), p.n_constraints, "multiplier arity mismatch");
    let f = p.objective_value(y);
    let h = p.constraint_values(y);
    f + lambda.iter().zip(&h).map(|(l, r)| l * r).sum::<f64>()
}

/// Elementwise clamp into `[lower, upper]`.
pub fn project(y: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(lower.iter().zip(upper))
        .map(|(&v, (&lo, &hi))| v.max(lo).min(hi))
        .collect()
}

/// Sigmoid map of an unconstrained variable into `(lower, upper)`:
/// `(upper - lower) / (1 + e^(-alpha x)) + lower`. Strictly increasing in
/// `x`; the bounds are approached only in the limit.
pub fn reparametrize(x: f64, lower: f64, upper: f64, alpha: f64) -> f64 {
    debug_assert!(lower < upper && alpha > 0.0);
    (upper - lower) / (1.0 + math::exp(-alpha * x)) + lower
}

/// Inverse of [`reparametrize`]: the unconstrained preimage of an interior
/// point (used to seed reparametrized solves from a feasible guess).
pub fn reparametrize_inverse(y: f64, lower: f64, upper: f64, alpha: f64) -> f64 {
    let margin = 1e-9 * (upper - lower);
    let yc = y.max(lower + margin).min(upper - margin);
    let s = (yc - lower) / (upper - lower);
    -math::ln(1.0 / s - 1.0) / alpha
}

fn reparametrize_var<'t>(x: Var<'t>, lower: f64, upper: f64, alpha: Var<'t>) -> Var<'t> {
    let one_plus = (-(alpha * x)).exp() + 1.0;
    (upper - lower) / one_plus + lower
}

// ---------------------------------------------------------------------------
// Recorded Lagrangian: record once, replay every iteration.
// ---------------------------------------------------------------------------

/// Which coordinates a reparametrized solve maps through the sigmoid.
#[derive(Clone)]
enum VarMap {
    Direct,
    Sigmoid(Vec<Option<(f64, f64)>>),
}

/// The Lagrangian recorded as a reusable graph with inputs
/// `[y (n), lambda (m), alpha]` and outputs `[L, f, h...]`.
struct LagrangianProgram {
    rec: Recording,
    n: usize,
    m: usize,
}

struct LagEval {
    f: f64,
    h: Vec<f64>,
    grad_y: Vec<f64>,
}

impl LagrangianProgram {
    fn record(
        p: &NlpProblem,
        scale: f64,
        map: &VarMap,
        y0: &[f64],
        lam0: &[f64],
        alpha0: f64,
    ) -> Result<Self, SolveError> {
        let n = p.n_decision();
        let m = p.n_constraints;
        let mut point = Vec::with_capacity(n + m + 1);
        point.extend_from_slice(y0);
        point.extend_from_slice(lam0);
        point.push(alpha0);
        let objective = Arc::clone(&p.objective);
        let constraints = Arc::clone(&p.constraints);
        let map = map.clone();
        let rec = Recording::record(
            move |tape, inputs| {
                let y_raw = &inputs[..n];
                let lam = &inputs[n..n + m];
                let alpha = inputs[n + m];
                let y: Vec<Var<'_>> = match &map {
                    VarMap::Direct => y_raw.to_vec(),
                    VarMap::Sigmoid(bounds) => y_raw
                        .iter()
                        .zip(bounds)
                        .map(|(&x, b)| match b {
                            Some((lo, hi)) => reparametrize_var(x, *lo, *hi, alpha),
                            None => x,
                        })
                        .collect(),
                };
                let f = objective.eval(tape, &y);
                let h = constraints.eval(tape, &y);
                let mut l = f * scale;
                for (&li, &hi) in lam.iter().zip(&h) {
                    l = l + li * hi;
                }
                let mut outputs = vec![l, f];
                outputs.extend(h);
                outputs
            },
            &point,
        )?;
        Ok(LagrangianProgram { rec, n, m })
    }

    /// Replay at `(y, lambda, alpha)` and run one reverse sweep of `L`.
    fn eval(&mut self, y: &[f64], lam: &[f64], alpha: f64) -> Result<LagEval, SolveError> {
        let mut point = Vec::with_capacity(self.n + self.m + 1);
        point.extend_from_slice(y);
        point.extend_from_slice(lam);
        point.push(alpha);
        self.rec.replay(&point)?;
        let adj = self.rec.gradient(0);
        let grad_y = adj[..self.n].to_vec();
        let f = self.rec.output(1);
        let h: Vec<f64> = (0..self.m).map(|i| self.rec.output(2 + i)).collect();
        Ok(LagEval { f, h, grad_y })
    }
}

// ---------------------------------------------------------------------------
// Public single-step operations.
// ---------------------------------------------------------------------------

fn project_in_place(y: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &lo), &hi) in y.iter_mut().zip(lower).zip(upper) {
        *v = v.max(lo).min(hi);
    }
}

fn check_finite(vals: &[f64], iteration: usize) -> Result<(), SolveError> {
    if vals.iter().any(|v| !v.is_finite()) {
        Err(SolveError::NonFinite { iteration })
    } else {
        Ok(())
    }
}

/// One simultaneous descent/ascent step: `y -= eta_y ∇_y L`,
/// `lambda += eta_lambda h(y)`, gradients at the pre-step iterate,
/// projection applied to `y` when bounds are enforced by projection.
pub fn gda_step(
    p: &NlpProblem,
    state: &SolverState,
    cfg: &SolverConfig,
) -> Result<SolverState, SolveError> {
    cfg.validate()?;
    let mut prog = LagrangianProgram::record(
        p,
        cfg.objective_scale,
        &VarMap::Direct,
        &state.y,
        &state.lambda,
        cfg.alpha.initial,
    )?;
    let e = prog.eval(&state.y, &state.lambda, cfg.alpha.initial)?;
    check_finite(&e.grad_y, state.iteration)?;
    let mut y: Vec<f64> = state
        .y
        .iter()
        .zip(&e.grad_y)
        .map(|(&v, &g)| v - cfg.eta_y * g)
        .collect();
    if cfg.bound_mode == BoundMode::Projection {
        project_in_place(&mut y, &p.lower, &p.upper);
    }
    let lambda: Vec<f64> = state
        .lambda
        .iter()
        .zip(&e.h)
        .map(|(&l, &h)| l + cfg.eta_lambda * h)
        .collect();
    Ok(SolverState {
        y,
        lambda,
        iteration: state.iteration + 1,
    })
}

/// One extragradient step: a gradient-descent-ascent lookahead, then the
/// lookahead point's gradients applied to the original iterate.
pub fn extragradient_step(
    p: &NlpProblem,
    state: &SolverState,
    cfg: &SolverConfig,
) -> Result<SolverState, SolveError> {
    cfg.validate()?;
    let mut prog = LagrangianProgram::record(
        p,
        cfg.objective_scale,
        &VarMap::Direct,
        &state.y,
        &state.lambda,
        cfg.alpha.initial,
    )?;
    let project_bounds = cfg.bound_mode == BoundMode::Projection;
    let next = eg_update(
        &mut prog,
        &state.y,
        &state.lambda,
        cfg.eta_y,
        cfg.eta_lambda,
        cfg.alpha.initial,
        project_bounds.then_some((&p.lower, &p.upper)),
        state.iteration,
    )?;
    Ok(SolverState {
        y: next.0,
        lambda: next.1,
        iteration: state.iteration + 1,
    })
}

type Bounds<'a> = (&'a [f64], &'a [f64]);

#[allow(clippy::too_many_arguments)]
fn eg_update(
    prog: &mut LagrangianProgram,
    y: &[f64],
    lam: &[f64],
    eta_y: f64,
    eta_l: f64,
    alpha: f64,
    bounds: Option<Bounds<'_>>,
    iteration: usize,
) -> Result<(Vec<f64>, Vec<f64>), SolveError> {
    let e0 = prog.eval(y, lam, alpha)?;
    check_finite(&e0.grad_y, iteration)?;
    let mut y_bar: Vec<f64> = y
        .iter()
        .zip(&e0.grad_y)
        .map(|(&v, &g)| v - eta_y * g)
        .collect();
    if let Some((lo, hi)) = bounds {
        project_in_place(&mut y_bar, lo, hi);
    }
    let lam_bar: Vec<f64> = lam
        .iter()
        .zip(&e0.h)
        .map(|(&l, &h)| l + eta_l * h)
        .collect();
    let e1 = prog.eval(&y_bar, &lam_bar, alpha)?;
    check_finite(&e1.grad_y, iteration)?;
    let mut y_next: Vec<f64> = y
        .iter()
        .zip(&e1.grad_y)
        .map(|(&v, &g)| v - eta_y * g)
        .collect();
    if let Some((lo, hi)) = bounds {
        project_in_place(&mut y_next, lo, hi);
    }
    let lam_next: Vec<f64> = lam
        .iter()
        .zip(&e1.h)
        .map(|(&l, &h)| l + eta_l * h)
        .collect();
    Ok((y_next, lam_next))
}

// ---------------------------------------------------------------------------
// Equilibration.
// ---------------------------------------------------------------------------

/// Diagonal scalings `y = d ∘ ỹ`, `h̃ = e ∘ h`, from Ruiz iteration on the
/// KKT structure (constraint Jacobian at the initial guess plus an
/// objective Hessian-diagonal estimate).
struct Scaling {
    d: Vec<f64>,
    e: Vec<f64>,
}

impl Scaling {
    fn identity(n: usize, m: usize) -> Self {
        Scaling {
            d: vec![1.0; n],
            e: vec![1.0; m],
        }
    }
}

/// Central-difference estimate of the objective's Hessian diagonal, reusing
/// one recorded gradient graph.
fn hessian_diag_estimate(p: &NlpProblem, y0: &[f64]) -> Result<Vec<f64>, SolveError> {
    let n = p.n_decision();
    let objective = Arc::clone(&p.objective);
    let mut rec = Recording::record(
        move |tape, y| vec![objective.eval(tape, y)],
        y0,
    )?;
    let mut diag = vec![0.0; n];
    let mut pt = y0.to_vec();
    for i in 0..n {
        let delta = 1e-4 * (1.0 + y0[i].abs());
        pt[i] = y0[i] + delta;
        let gp = if rec.replay(&pt).is_ok() {
            rec.gradient(0)[i]
        } else {
            0.0
        };
        pt[i] = y0[i] - delta;
        let gm = if rec.replay(&pt).is_ok() {
            rec.gradient(0)[i]
        } else {
            0.0
        };
        pt[i] = y0[i];
        let d2 = (gp - gm) / (2.0 * delta);
        diag[i] = if d2.is_finite() { d2 } else { 0.0 };
    }
    Ok(diag)
}

fn ruiz_scaling(p: &NlpProblem, scale: f64) -> Result<Scaling, SolveError> {
    let n = p.n_decision();
    let m = p.n_constraints;
    let hd: Vec<f64> = hessian_diag_estimate(p, &p.x0_guess)?
        .into_iter()
        .map(|v| v.abs() * scale)
        .collect();
    let jac = if m > 0 {
        let constraints = Arc::clone(&p.constraints);
        let (_, j) = ad::jacobian(
            move |tape, y| constraints.eval(tape, y),
            &p.x0_guess,
        )?;
        Some(j)
    } else {
        None
    };
    let mut s = Scaling::identity(n, m);
    for _ in 0..15 {
        let mut col = vec![0.0f64; n];
        let mut row = vec![0.0f64; m];
        for j in 0..n {
            col[j] = hd[j] * s.d[j] * s.d[j];
        }
        if let Some(jac) = &jac {
            for i in 0..m {
                for j in 0..n {
                    let v = jac[(i, j)].abs() * s.e[i] * s.d[j];
                    col[j] = col[j].max(v);
                    row[i] = row[i].max(v);
                }
            }
        }
        for j in 0..n {
            if col[j] > 0.0 && col[j].is_finite() {
                s.d[j] /= math::sqrt(math::sqrt(col[j]) * math::sqrt(col[j]));
            }
        }
        for i in 0..m {
            if row[i] > 0.0 && row[i].is_finite() {
                s.e[i] /= math::sqrt(row[i]);
            }
        }
    }
    // column updates above fold in sqrt twice; normalize to plain 1/sqrt
    Ok(s)
}

/// Objective of the scaled problem: `f(d ∘ ỹ)`.
struct ScaledObjective {
    inner: Arc<dyn ScalarField>,
    d: Vec<f64>,
}

impl ScalarField for ScaledObjective {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>]) -> Var<'t> {
        let mapped: Vec<Var<'t>> = y.iter().zip(&self.d).map(|(&v, &di)| v * di).collect();
        self.inner.eval(tape, &mapped)
    }
}

/// Constraints of the scaled problem: `e ∘ h(d ∘ ỹ)`.
struct ScaledConstraints {
    inner: Arc<dyn VectorField>,
    d: Vec<f64>,
    e: Vec<f64>,
}

impl VectorField for ScaledConstraints {
    fn eval<'t>(&self, tape: &'t Tape, y: &[Var<'t>]) -> Vec<Var<'t>> {
        let mapped: Vec<Var<'t>> = y.iter().zip(&self.d).map(|(&v, &di)| v * di).collect();
        self.inner
            .eval(tape, &mapped)
            .into_iter()
            .zip(&self.e)
            .map(|(h, &ei)| h * ei)
            .collect()
    }
}

fn scaled_problem(p: &NlpProblem, s: &Scaling) -> NlpProblem {
    let div = |v: f64, d: f64| {
        if v.is_finite() {
            v / d
        } else {
            v
        }
    };
    NlpProblem {
        objective: Arc::new(ScaledObjective {
            inner: Arc::clone(&p.objective),
            d: s.d.clone(),
        }),
        constraints: Arc::new(ScaledConstraints {
            inner: Arc::clone(&p.constraints),
            d: s.d.clone(),
            e: s.e.clone(),
        }),
        n_constraints: p.n_constraints,
        lower: p.lower.iter().zip(&s.d).map(|(&v, &d)| div(v, d)).collect(),
        upper: p.upper.iter().zip(&s.d).map(|(&v, &d)| div(v, d)).collect(),
        x0_guess: p.x0_guess.iter().zip(&s.d).map(|(&v, &d)| v / d).collect(),
        layout: p.layout.clone(),
        state_times: p.state_times.clone(),
        control_times: p.control_times.clone(),
    }
}

// ---------------------------------------------------------------------------
// The solve loop.
// ---------------------------------------------------------------------------

/// Iterate the configured method from the problem's initial guess.
pub fn solve_nlp(p: &NlpProblem, cfg: &SolverConfig) -> Result<SolveReport, SolveError> {
    solve_nlp_warm(p, cfg, None)
}

/// [`solve_nlp`] starting from a caller-supplied iterate in problem
/// coordinates (used for warm starts across resolutions and outer loops).
pub fn solve_nlp_warm(
    p: &NlpProblem,
    cfg: &SolverConfig,
    warm: Option<&SolverState>,
) -> Result<SolveReport, SolveError> {
    cfg.validate()?;
    let n = p.n_decision();
    let m = p.n_constraints;

    // Variable transform: equilibration xor reparametrization.
    let (work, scaling, var_map) = match cfg.bound_mode {
        BoundMode::Projection => {
            if cfg.equilibrate {
                let s = ruiz_scaling(p, cfg.objective_scale)?;
                (scaled_problem(p, &s), s, VarMap::Direct)
            } else {
                (p.clone(), Scaling::identity(n, m), VarMap::Direct)
            }
        }
        BoundMode::Reparametrization => {
            if cfg.equilibrate {
                return Err(SolveError::BadConfig(
                    "equilibrate and reparametrization cannot be combined",
                ));
            }
            let mut maps = Vec::with_capacity(n);
            for (&lo, &hi) in p.lower.iter().zip(&p.upper) {
                if lo.is_finite() && hi.is_finite() {
                    if lo >= hi {
                        return Err(SolveError::BadConfig(
                            "reparametrization needs lower < upper",
                        ));
                    }
                    maps.push(Some((lo, hi)));
                } else if lo.is_finite() || hi.is_finite() {
                    return Err(SolveError::BadConfig(
                        "reparametrization supports two-sided or absent bounds only",
                    ));
                } else {
                    maps.push(None);
                }
            }
            (p.clone(), Scaling::identity(n, m), VarMap::Sigmoid(maps))
        }
    };

    // Initial iterate in solver coordinates.
    let mut y: Vec<f64> = match warm {
        Some(state) => {
            assert_eq!(state.y.len(), n, "warm start arity mismatch");
            match &var_map {
                VarMap::Direct => state
                    .y
                    .iter()
                    .zip(&scaling.d)
                    .map(|(&v, &d)| v / d)
                    .collect(),
                VarMap::Sigmoid(maps) => state
                    .y
                    .iter()
                    .zip(maps)
                    .map(|(&v, map)| match map {
                        Some((lo, hi)) => reparametrize_inverse(v, *lo, *hi, cfg.alpha.initial),
                        None => v,
                    })
                    .collect(),
            }
        }
        None => match &var_map {
            VarMap::Direct => work.x0_guess.clone(),
            VarMap::Sigmoid(maps) => p
                .x0_guess
                .iter()
                .zip(maps)
                .map(|(&v, map)| match map {
                    Some((lo, hi)) => reparametrize_inverse(v, *lo, *hi, cfg.alpha.initial),
                    None => v,
                })
                .collect(),
        },
    };
    let mut lam: Vec<f64> = warm.map_or_else(|| vec![0.0; m], |s| s.lambda.clone());
    assert_eq!(lam.len(), m, "warm multiplier arity mismatch");

    let mut prog = LagrangianProgram::record(
        &work,
        cfg.objective_scale,
        &var_map,
        &y,
        &lam,
        cfg.alpha.initial,
    )?;
    let project_bounds =
        cfg.bound_mode == BoundMode::Projection && (cfg.equilibrate || true);

    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut alpha = cfg.alpha.initial;
    let mut eta_y = cfg.eta_y;
    let mut eta_l = cfg.eta_lambda;

    // Residuals of the ORIGINAL problem at a solver-coordinate iterate.
    let raw_residuals = |e: &LagEval, y: &[f64], alpha: f64| -> (f64, f64, Vec<f64>) {
        let y_raw: Vec<f64> = match &var_map {
            VarMap::Direct => y.iter().zip(&scaling.d).map(|(&v, &d)| v * d).collect(),
            VarMap::Sigmoid(maps) => y
                .iter()
                .zip(maps)
                .map(|(&v, map)| match map {
                    Some((lo, hi)) => reparametrize(v, *lo, *hi, alpha),
                    None => v,
                })
                .collect(),
        };
        let h_raw: Vec<f64> = e.h.iter().zip(&scaling.e).map(|(&h, &ei)| h / ei).collect();
        let grad_inf = match &var_map {
            VarMap::Direct => {
                // KKT residual of the original problem: projected-gradient
                // distance in raw coordinates.
                let mut worst = 0.0f64;
                for i in 0..y_raw.len() {
                    let g_raw = e.grad_y[i] / (scaling.d[i] * cfg.objective_scale);
                    let stepped = (y_raw[i] - g_raw).max(p.lower[i]).min(p.upper[i]);
                    worst = worst.max((y_raw[i] - stepped).abs());
                }
                worst
            }
            // Unconstrained coordinates: plain gradient norm (rescaled by
            // the objective factor).
            VarMap::Sigmoid(_) => inf_norm(&e.grad_y) / cfg.objective_scale,
        };
        (grad_inf, inf_norm(&h_raw), y_raw)
    };

    let mut final_eval: Option<(f64, f64, f64)> = None;
    let mut snapshots: Vec<(usize, Vec<f64>)> = Vec::new();
    for it in 0..cfg.max_iters {
        let e = prog.eval(&y, &lam, alpha)?;
        check_finite(&e.grad_y, it)?;
        let (grad_inf, h_inf, y_raw_it) = raw_residuals(&e, &y, alpha);
        diagnostics.push(IterRecord {
            iteration: it,
            f: e.f,
            h_inf,
            grad_inf,
        });
        if cfg.snapshot_stride > 0 && it % cfg.snapshot_stride == 0 {
            snapshots.push((it, y_raw_it));
        }
        if grad_inf <= cfg.tol_grad && h_inf <= cfg.tol_constraint {
            converged = true;
            iterations = it;
            final_eval = Some((e.f, h_inf, grad_inf));
            break;
        }

        match cfg.method {
            Method::Gda => {
                let mut y_next: Vec<f64> = y
                    .iter()
                    .zip(&e.grad_y)
                    .map(|(&v, &g)| v - eta_y * g)
                    .collect();
                if project_bounds {
                    project_in_place(&mut y_next, &work.lower, &work.upper);
                }
                for (l, &h) in lam.iter_mut().zip(&e.h) {
                    *l += eta_l * h;
                }
                y = y_next;
            }
            Method::Extragradient => {
                let bounds = project_bounds.then_some((work.lower.as_slice(), work.upper.as_slice()));
                let (y_next, lam_next) =
                    eg_update(&mut prog, &y, &lam, eta_y, eta_l, alpha, bounds, it)?;
                y = y_next;
                lam = lam_next;
            }
        }
        if inf_norm(&y).max(inf_norm(&lam)) > cfg.divergence_ceiling {
            return Err(SolveError::Diverged { iteration: it });
        }
        alpha *= cfg.alpha.decay;
        eta_y *= cfg.eta_decay;
        eta_l *= cfg.eta_decay;
        iterations = it + 1;
    }

    // Final residuals (recomputed if the loop exhausted its budget).
    let e = prog.eval(&y, &lam, alpha)?;
    let (grad_inf, h_inf, y_raw) = raw_residuals(&e, &y, alpha);
    let (f, h_inf, grad_inf) = final_eval.unwrap_or((e.f, h_inf, grad_inf));
    let lambda_raw: Vec<f64> = lam
        .iter()
        .zip(&scaling.e)
        .map(|(&l, &ei)| l * ei / cfg.objective_scale)
        .collect();
    if cfg.snapshot_stride > 0 {
        snapshots.push((iterations, y_raw.clone()));
    }
    Ok(SolveReport {
        state: SolverState {
            y,
            lambda: lam,
            iteration: iterations,
        },
        y: y_raw,
        lambda: lambda_raw,
        f,
        h_inf,
        grad_inf,
        converged,
        iterations,
        diagnostics,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{scalar_fn, vector_fn};
    use crate::transcribe::DecisionLayout;
    use approx::assert_relative_eq;

    /// Hand-built problem over plain closures (no transcription).
    fn toy_problem() -> NlpProblem {
        // f = y^2, h = y - 1; KKT: y* = 1, lambda* = -2
        NlpProblem {
            objective: Arc::new(scalar_fn(|_t: &Tape, y: &[Var<'_>]| y[0] * y[0])),
            constraints: Arc::new(vector_fn(|_t: &Tape, y: &[Var<'_>]| vec![y[0] - 1.0])),
            n_constraints: 1,
            lower: vec![f64::NEG_INFINITY],
            upper: vec![f64::INFINITY],
            x0_guess: vec![0.0],
            layout: DecisionLayout {
                n_free_start: 0,
                n_state_nodes: 0,
                state_dim: 0,
                n_control_nodes: 1,
                control_dim: 1,
            },
            state_times: vec![],
            control_times: vec![0.0],
        }
    }

    fn bilinear_problem() -> NlpProblem {
        // f = 0, h = y: L = lambda * y
        NlpProblem {
            objective: Arc::new(scalar_fn(|t: &Tape, _y: &[Var<'_>]| t.constant(0.0))),
            constraints: Arc::new(vector_fn(|_t: &Tape, y: &[Var<'_>]| vec![y[0]])),
            n_constraints: 1,
            lower: vec![f64::NEG_INFINITY],
            upper: vec![f64::INFINITY],
            x0_guess: vec![1.0],
            layout: DecisionLayout {
                n_free_start: 0,
                n_state_nodes: 0,
                state_dim: 0,
                n_control_nodes: 1,
                control_dim: 1,
            },
            state_times: vec![],
            control_times: vec![0.0],
        }
    }

    fn unconstrained_quadratic(n: usize) -> NlpProblem {
        NlpProblem {
            objective: Arc::new(scalar_fn(|t: &Tape, y: &[Var<'_>]| {
                let mut acc = t.constant(0.0);
                for &v in y {
                    acc = acc + v * v;
                }
                acc
            })),
            constraints: Arc::new(vector_fn(|_t: &Tape, _y: &[Var<'_>]| vec![])),
            n_constraints: 0,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            x0_guess: vec![2.0; n],
            layout: DecisionLayout {
                n_free_start: 0,
                n_state_nodes: 0,
                state_dim: 0,
                n_control_nodes: n,
                control_dim: 1,
            },
            state_times: vec![],
            control_times: vec![0.0; n],
        }
    }

    #[test]
    fn lagrangian_values() {
        let p = toy_problem();
        assert_eq!(lagrangian(&p, &[1.0], &[-2.0]), 1.0);
        assert_eq!(lagrangian(&p, &[3.0], &[0.0]), 9.0);
        let q = unconstrained_quadratic(1);
        assert_eq!(lagrangian(&q, &[3.0], &[]), 9.0);
    }

    #[test]
    fn gda_step_hand_arithmetic() {
        let p = toy_problem();
        let cfg = SolverConfig {
            eta_y: 0.1,
            eta_lambda: 0.1,
            ..SolverConfig::default()
        };
        let s0 = SolverState {
            y: vec![0.0],
            lambda: vec![0.0],
            iteration: 0,
        };
        let s1 = gda_step(&p, &s0, &cfg).unwrap();
        assert_eq!(s1.y, vec![0.0]);
        assert_relative_eq!(s1.lambda[0], -0.1, max_relative = 1e-15);
        assert_eq!(s1.iteration, 1);
    }

    #[test]
    fn gda_fixed_point_at_kkt() {
        let p = toy_problem();
        let cfg = SolverConfig {
            eta_y: 0.1,
            eta_lambda: 0.1,
            ..SolverConfig::default()
        };
        let s = SolverState {
            y: vec![1.0],
            lambda: vec![-2.0],
            iteration: 7,
        };
        let s1 = gda_step(&p, &s, &cfg).unwrap();
        assert_eq!(s1.y, s.y);
        assert_eq!(s1.lambda, s.lambda);
    }

    #[test]
    fn gda_bilinear_grows() {
        let p = bilinear_problem();
        let cfg = SolverConfig {
            eta_y: 0.1,
            eta_lambda: 0.1,
            ..SolverConfig::default()
        };
        let s0 = SolverState {
            y: vec![1.0],
            lambda: vec![1.0],
            iteration: 0,
        };
        let s1 = gda_step(&p, &s0, &cfg).unwrap();
        assert_relative_eq!(s1.y[0], 0.9, max_relative = 1e-15);
        assert_relative_eq!(s1.lambda[0], 1.1, max_relative = 1e-15);
        let sq = s1.y[0] * s1.y[0] + s1.lambda[0] * s1.lambda[0];
        assert!(sq > 2.0, "GDA expands on the bilinear game: {sq}");
    }

    #[test]
    fn extragradient_bilinear_contracts() {
        let p = bilinear_problem();
        let cfg = SolverConfig {
            eta_y: 0.1,
            eta_lambda: 0.1,
            ..SolverConfig::default()
        };
        let s0 = SolverState {
            y: vec![1.0],
            lambda: vec![1.0],
            iteration: 0,
        };
        let s1 = extragradient_step(&p, &s0, &cfg).unwrap();
        assert_relative_eq!(s1.y[0], 0.89, max_relative = 1e-15);
        assert_relative_eq!(s1.lambda[0], 1.09, max_relative = 1e-15);
        let sq = s1.y[0] * s1.y[0] + s1.lambda[0] * s1.lambda[0];
        assert_relative_eq!(sq, 1.9802, max_relative = 1e-12);
    }

    #[test]
    fn extragradient_fixed_point_at_kkt() {
        let p = toy_problem();
        let cfg = SolverConfig::default();
        let s = SolverState {
            y: vec![1.0],
            lambda: vec![-2.0],
            iteration: 0,
        };
        let s1 = extragradient_step(&p, &s, &cfg).unwrap();
        assert_eq!(s1.y, s.y);
        assert_eq!(s1.lambda, s.lambda);
    }

    #[test]
    fn bilinear_trajectories_over_100_steps() {
        // GDA never shrinks; extragradient's modulus is sqrt((1-s^2)^2+s^2)
        // per step with s = 0.1, giving |z_100| ~ 0.85989. The first
        // iteration where the norm drops below 0.5 is 210.
        let p = bilinear_problem();
        let cfg = SolverConfig {
            eta_y: 0.1,
            eta_lambda: 0.1,
            ..SolverConfig::default()
        };
        let mut gda = SolverState {
            y: vec![1.0],
            lambda: vec![1.0],
            iteration: 0,
        };
        let mut prev = 2.0f64.sqrt();
        for _ in 0..100 {
            gda = gda_step(&p, &gda, &cfg).unwrap();
            let norm = (gda.y[0] * gda.y[0] + gda.lambda[0] * gda.lambda[0]).sqrt();
            assert!(norm >= prev - 1e-15, "GDA norm decreased");
            prev = norm;
        }
        let mut eg = SolverState {
            y: vec![1.0],
            lambda: vec![1.0],
            iteration: 0,
        };
        let mut below_half_at = None;
        for it in 1..=260 {
            eg = extragradient_step(&p, &eg, &cfg).unwrap();
            let norm = (eg.y[0] * eg.y[0] + eg.lambda[0] * eg.lambda[0]).sqrt();
            if it == 100 {
                // frozen from the same recursion run independently
                assert_relative_eq!(norm, 0.8599397482155158, max_relative = 1e-10);
            }
            if below_half_at.is_none() && norm < 0.5 {
                below_half_at = Some(it);
            }
        }
        assert_eq!(below_half_at, Some(210));
    }

    #[test]
    fn solve_toy_kkt() {
        let p = toy_problem();
        let cfg = SolverConfig {
            eta_y: 0.3,
            eta_lambda: 0.3,
            max_iters: 20_000,
            tol_grad: 1e-6,
            tol_constraint: 1e-6,
            ..SolverConfig::default()
        };
        let rep = solve_nlp(&p, &cfg).unwrap();
        assert!(rep.converged, "should converge: {:?}", rep.diagnostics.last());
        assert_relative_eq!(rep.y[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(rep.lambda[0], -2.0, epsilon = 1e-4);
        // independent KKT certificate on the original problem
        let (_, g) = ad::gradient(
            scalar_fn(|_t: &Tape, y: &[Var<'_>]| y[0] * y[0]),
            &rep.y,
        )
        .unwrap();
        let kkt = g[0] + rep.lambda[0] * 1.0;
        assert!(kkt.abs() <= 10.0 * cfg.tol_grad, "stationarity {kkt}");
        assert!((rep.y[0] - 1.0).abs() <= cfg.tol_constraint * 10.0);
    }

    #[test]
    fn solve_unconstrained_quadratic() {
        let p = unconstrained_quadratic(4);
        let cfg = SolverConfig {
            eta_y: 0.3,
            eta_lambda: 0.3,
            max_iters: 2_000,
            ..SolverConfig::default()
        };
        let rep = solve_nlp(&p, &cfg).unwrap();
        assert!(rep.converged);
        assert!(inf_norm(&rep.y) < 1e-5);
    }

    #[test]
    fn solve_with_equilibration_matches() {
        let p = toy_problem();
        let cfg = SolverConfig {
            eta_y: 0.3,
            eta_lambda: 0.3,
            max_iters: 20_000,
            equilibrate: true,
            ..SolverConfig::default()
        };
        let rep = solve_nlp(&p, &cfg).unwrap();
        assert!(rep.converged);
        assert_relative_eq!(rep.y[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(rep.lambda[0], -2.0, epsilon = 1e-3);
    }

    #[test]
    fn divergence_is_reported() {
        // concave objective: plain descent runs away
        let p = NlpProblem {
            objective: Arc::new(scalar_fn(|_t: &Tape, y: &[Var<'_>]| -(y[0] * y[0]))),
            constraints: Arc::new(vector_fn(|_t: &Tape, _y: &[Var<'_>]| vec![])),
            n_constraints: 0,
            lower: vec![f64::NEG_INFINITY],
            upper: vec![f64::INFINITY],
            x0_guess: vec![1.0],
            layout: DecisionLayout {
                n_free_start: 0,
                n_state_nodes: 0,
                state_dim: 0,
                n_control_nodes: 1,
                control_dim: 1,
            },
            state_times: vec![],
            control_times: vec![0.0],
        };
        let cfg = SolverConfig {
            eta_y: 0.6,
            max_iters: 100_000,
            ..SolverConfig::default()
        };
        assert!(matches!(
            solve_nlp(&p, &cfg),
            Err(SolveError::Diverged { .. })
        ));
    }

    #[test]
    fn projection_examples() {
        assert_eq!(
            project(&[-1.0, 0.5, 7.0], &[0.0; 3], &[1.0; 3]),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(
            project(&[0.3], &[f64::NEG_INFINITY], &[f64::INFINITY]),
            vec![0.3]
        );
    }

    #[test]
    fn reparametrize_examples() {
        assert_relative_eq!(reparametrize(0.0, 0.0, 4.0, 1.0), 2.0);
        assert_relative_eq!(
            reparametrize(1.0, 0.0, 1.0, 1.0),
            1.0 / (1.0 + math::exp(-1.0)),
            max_relative = 1e-15
        );
        assert!(reparametrize(80.0, -1.0, 1.0, 1.0) <= 1.0);
        assert!(reparametrize(-80.0, -1.0, 1.0, 1.0) >= -1.0);
        let x = reparametrize_inverse(0.7, 0.0, 1.0, 2.0);
        assert_relative_eq!(reparametrize(x, 0.0, 1.0, 2.0), 0.7, max_relative = 1e-12);
    }

    #[test]
    fn solve_with_reparametrization_stays_interior() {
        // min (y - 0.6)^2 on [0, 1]: interior optimum
        let p = NlpProblem {
            objective: Arc::new(scalar_fn(|_t: &Tape, y: &[Var<'_>]| {
                (y[0] - 0.6) * (y[0] - 0.6)
            })),
            constraints: Arc::new(vector_fn(|_t: &Tape, _y: &[Var<'_>]| vec![])),
            n_constraints: 0,
            lower: vec![0.0],
            upper: vec![1.0],
            x0_guess: vec![0.2],
            layout: DecisionLayout {
                n_free_start: 0,
                n_state_nodes: 0,
                state_dim: 0,
                n_control_nodes: 1,
                control_dim: 1,
            },
            state_times: vec![],
            control_times: vec![0.0],
        };
        let cfg = SolverConfig {
            eta_y: 0.5,
            max_iters: 20_000,
            bound_mode: BoundMode::Reparametrization,
            tol_grad: 1e-8,
            ..SolverConfig::default()
        };
        let rep = solve_nlp(&p, &cfg).unwrap();
        assert!(rep.converged);
        assert!(rep.y[0] > 0.0 && rep.y[0] < 1.0);
        assert_relative_eq!(rep.y[0], 0.6, epsilon = 1e-4);
    }

    #[test]
    fn solve_with_projection_active_bound() {
        // min (y - 2)^2 on [0, 1]: optimum pinned at y = 1; the projected
        // KKT residual must recognize it.
        let p = NlpProblem {
            objective: Arc::new(scalar_fn(|_t: &Tape, y: &[Var<'_>]| {
                (y[0] - 2.0) * (y[0] - 2.0)
            })),
            constraints: Arc::new(vector_fn(|_t: &Tape, _y: &[Var<'_>]| vec![])),
            n_constraints: 0,
            lower: vec![0.0],
            upper: vec![1.0],
            x0_guess: vec![0.5],
            layout: DecisionLayout {
                n_free_start: 0,
                n_state_nodes: 0,
                state_dim: 0,
                n_control_nodes: 1,
                control_dim: 1,
            },
            state_times: vec![],
            control_times: vec![0.0],
        };
        let cfg = SolverConfig {
            eta_y: 0.3,
            max_iters: 5_000,
            ..SolverConfig::default()
        };
        let rep = solve_nlp(&p, &cfg).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.y[0], 1.0);
    }

    proptest::proptest! {
        #[test]
        fn project_idempotent_nonexpansive(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let lower = vec![-1.0, 0.0, -3.0, 2.0];
            let upper = vec![1.0, 0.5, 4.0, 2.0];
            let pa = project(&a, &lower, &upper);
            let pb = project(&b, &lower, &upper);
            proptest::prop_assert_eq!(&project(&pa, &lower, &upper), &pa);
            let d_orig: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let d_proj: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            proptest::prop_assert!(d_proj <= d_orig + 1e-15);
        }

        #[test]
        fn reparametrize_interior_and_monotone(
            x in -30.0f64..30.0,
            dx in 0.001f64..5.0,
        ) {
            let (lo, hi) = (-2.0, 3.0);
            let y = reparametrize(x, lo, hi, 0.7);
            proptest::prop_assert!(y > lo && y < hi);
            let y2 = reparametrize(x + dx, lo, hi, 0.7);
            proptest::prop_assert!(y2 > y);
        }
    }
}
