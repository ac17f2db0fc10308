//! System identification: learn unknown dynamics from observed trajectories
//! as a neural ODE conditioned on the control input.
//!
//! The model is a plain MLP `f(x, u, θ) = net(θ, [x, u])` with tanh hidden
//! layers and identity output. Training minimizes the mean squared error
//! between observed state trajectories and the model's RK4 rollout under
//! the same controls, differentiating straight through the unrolled
//! integrator.

use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::ad::{AdError, Recording, Tape, Var};
use crate::integrate::{rollout, ControlSpline, IntegrateError, IntegratorKind, InterpScheme};
use crate::linalg::Mat;
use crate::systems::{ControlSystem, Dynamics};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SysIdError {
    #[error("width mismatch: expected input {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("prediction blew up (non-finite state)")]
    Blowup,
    #[error("the uniform-random strategy requires control bounds")]
    MissingBounds,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0}")]
    BadConfig(&'static str),
    #[error("integration failed: {0}")]
    Integrate(#[from] IntegrateError),
    #[error("autodiff failure: {0}")]
    Ad(#[from] AdError),
}

// ---------------------------------------------------------------------------
// MLP parameters.
// ---------------------------------------------------------------------------

/// Layer widths of the dynamics net: input `D + M`, output `D`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpShape {
    pub fn new(state_dim: usize, control_dim: usize, hidden: Vec<usize>) -> Self {
        MlpShape {
            input: state_dim + control_dim,
            hidden,
            output: state_dim,
        }
    }

    /// Widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input);
        w.extend_from_slice(&self.hidden);
        w.push(self.output);
        w
    }

    pub fn n_params(&self) -> usize {
        self.widths()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Flattened weight/bias collection: per layer, the row-major weight matrix
/// followed by the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub shape: MlpShape,
    pub flat: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(shape: MlpShape) -> Self {
        let n = shape.n_params();
        MlpParams {
            shape,
            flat: vec![0.0; n],
        }
    }

    /// Deterministic scaled-uniform initialization (biases zero).
    pub fn init(shape: MlpShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = shape.widths();
        let mut flat = Vec::with_capacity(shape.n_params());
        for w in widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let s = crate::math::sqrt(6.0 / (n_in + n_out) as f64);
            for _ in 0..n_in * n_out {
                flat.push(rng.random_range(-s..s));
            }
            flat.extend(core::iter::repeat(0.0).take(n_out));
        }
        MlpParams { shape, flat }
    }
}

/// Feed-forward pass with parameters and inputs as tape variables; tanh on
/// hidden layers, identity output.
pub(crate) fn mlp_forward_vars<'t>(
    shape: &MlpShape,
    params: &[Var<'t>],
    input: &[Var<'t>],
    tape: &'t Tape,
) -> Vec<Var<'t>> {
    debug_assert_eq!(params.len(), shape.n_params());
    debug_assert_eq!(input.len(), shape.input);
    let widths = shape.widths();
    let n_layers = widths.len() - 1;
    let mut act: Vec<Var<'t>> = input.to_vec();
    let mut off = 0;
    for l in 0..n_layers {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut next = Vec::with_capacity(n_out);
        for r in 0..n_out {
            let mut z = b[r] + tape.constant(0.0);
            for (c, &a) in act.iter().enumerate() {
                z = z + w[r * n_in + c] * a;
            }
            next.push(if l + 1 < n_layers { z.tanh() } else { z });
        }
        act = next;
    }
    act
}

/// Evaluate the learned dynamics at numeric state/control.
pub fn neural_dynamics(params: &MlpParams, x: &[f64], u: &[f64]) -> Result<Vec<f64>, SysIdError> {
    if x.len() + u.len() != params.shape.input {
        return Err(SysIdError::WidthMismatch {
            expected: params.shape.input,
            got: x.len() + u.len(),
        });
    }
    let tape = Tape::new();
    let pv = tape.vars(&params.flat);
    let mut input = Vec::with_capacity(x.len() + u.len());
    input.extend_from_slice(x);
    input.extend_from_slice(u);
    let iv = tape.vars(&input);
    Ok(mlp_forward_vars(&params.shape, &pv, &iv, &tape)
        .into_iter()
        .map(|v| v.value())
        .collect())
}

/// The learned model packaged as system dynamics, so the planner can run on
/// it unchanged.
pub struct NeuralDynamics {
    pub params: MlpParams,
}

impl Dynamics for NeuralDynamics {
    fn eval<'t>(&self, tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
        let pv: Vec<Var<'t>> = self.params.flat.iter().map(|&p| tape.constant(p)).collect();
        let mut input = Vec::with_capacity(x.len() + u.len());
        input.extend_from_slice(x);
        input.extend_from_slice(u);
        mlp_forward_vars(&self.params.shape, &pv, &input, tape)
    }
}

// ---------------------------------------------------------------------------
// Datasets.
// ---------------------------------------------------------------------------

/// How episode controls are sampled.
#[derive(Debug, Clone)]
pub enum ControlStrategy {
    /// I.i.d. uniform within the control bounds at every node.
    UniformRandom,
    /// Clipped Gaussian random walk started at the mid-range control.
    GaussianRandomWalk { walk_sigma: f64 },
    /// Gaussian perturbations of a candidate control trajectory.
    AroundCandidate { candidate: Mat, walk_sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `(N+1) x M`
    pub controls: Mat,
    /// `(N+1) x D`; row 0 is the exact start state.
    pub observed: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SysIdDataset {
    pub episodes: Vec<Episode>,
    /// Shared time grid.
    pub times: Vec<f64>,
    pub noise_sigma: f64,
}

/// Sample episode controls per the strategy, roll out the true dynamics
/// with RK4, and add i.i.d. Gaussian observation noise to every row except
/// the (exactly observed) initial state. Deterministic in `seed`.
pub fn generate_dataset(
    sys: &ControlSystem,
    strategy: &ControlStrategy,
    n_episodes: usize,
    n_steps: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SysIdDataset, SysIdError> {
    if n_episodes == 0 || n_steps == 0 {
        return Err(SysIdError::BadConfig("need n_episodes >= 1 and n_steps >= 1"));
    }
    let m = sys.control_dim;
    let bounds = sys.control_bounds.clone();
    let clip = |v: f64, j: usize| -> f64 {
        match &bounds {
            Some(b) => v.max(b[j].0).min(b[j].1),
            None => v,
        }
    };
    let mid: Vec<f64> = match &bounds {
        Some(b) => b.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect(),
        None => vec![0.0; m],
    };
    if matches!(strategy, ControlStrategy::UniformRandom) && bounds.is_none() {
        return Err(SysIdError::MissingBounds);
    }
    if let ControlStrategy::AroundCandidate { candidate, .. } = strategy {
        if candidate.rows() != n_steps + 1 || candidate.cols() != m {
            return Err(SysIdError::BadConfig("candidate shape must be (n_steps+1) x M"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut times = Vec::new();
    for _ in 0..n_episodes {
        let mut controls = Mat::zeros(n_steps + 1, m);
        match strategy {
            ControlStrategy::UniformRandom => {
                let b = bounds.as_ref().expect("checked above");
                for i in 0..=n_steps {
                    for j in 0..m {
                        controls[(i, j)] = rng.random_range(b[j].0..=b[j].1);
                    }
                }
            }
            ControlStrategy::GaussianRandomWalk { walk_sigma } => {
                let mut u = mid.clone();
                for i in 0..=n_steps {
                    for j in 0..m {
                        controls[(i, j)] = u[j];
                    }
                    for (j, uj) in u.iter_mut().enumerate() {
                        let z: f64 = rng.sample(StandardNormal);
                        *uj = clip(*uj + walk_sigma * z, j);
                    }
                }
            }
            ControlStrategy::AroundCandidate { candidate, walk_sigma } => {
                for i in 0..=n_steps {
                    for j in 0..m {
                        let z: f64 = rng.sample(StandardNormal);
                        controls[(i, j)] = clip(candidate[(i, j)] + walk_sigma * z, j);
                    }
                }
            }
        }
        let spline = ControlSpline::uniform(
            controls.clone(),
            sys.t_start,
            sys.t_final,
            InterpScheme::PiecewiseLinear,
        )?;
        let (traj, _) = rollout(IntegratorKind::Rk4, sys, &spline, n_steps)?;
        let mut observed = traj.states.clone();
        for i in 1..=n_steps {
            for j in 0..sys.state_dim {
                let z: f64 = rng.sample(StandardNormal);
                observed[(i, j)] += noise_sigma * z;
            }
        }
        times = traj.times.clone();
        episodes.push(Episode { controls, observed });
    }
    Ok(SysIdDataset {
        episodes,
        times,
        noise_sigma,
    })
}

// ---------------------------------------------------------------------------
// Prediction and loss.
// ---------------------------------------------------------------------------

/// RK4 rollout of the neural dynamics as tape variables. `x0` and the
/// controls enter as constants; the parameters are the differentiation
/// inputs.
pub(crate) fn predict_vars<'t>(
    shape: &MlpShape,
    params: &[Var<'t>],
    x0: &[f64],
    controls: &Mat,
    times: &[f64],
    tape: &'t Tape,
) -> Vec<Vec<Var<'t>>> {
    let d = shape.output;
    let m = controls.cols();
    let mut rows = Vec::with_capacity(times.len());
    let mut x: Vec<Var<'t>> = x0.iter().map(|&v| tape.constant(v)).collect();
    rows.push(x.clone());
    let eval = |x: &[Var<'t>], u: &[f64]| -> Vec<Var<'t>> {
        let mut input = Vec::with_capacity(d + m);
        input.extend_from_slice(x);
        for &uj in u {
            input.push(tape.constant(uj));
        }
        mlp_forward_vars(shape, params, &input, tape)
    };
    let u_at = |t: f64| -> Vec<f64> {
        // piecewise-linear control interpolation on the shared grid
        let n = times.len();
        if t <= times[0] {
            return controls.row(0).to_vec();
        }
        if t >= times[n - 1] {
            return controls.row(n - 1).to_vec();
        }
        let i = times.partition_point(|&ti| ti <= t) - 1;
        let w = (t - times[i]) / (times[i + 1] - times[i]);
        controls
            .row(i)
            .iter()
            .zip(controls.row(i + 1))
            .map(|(a, b)| a * (1.0 - w) + b * w)
            .collect()
    };
    for s in 0..times.len() - 1 {
        let (t0, t1) = (times[s], times[s + 1]);
        let dt = t1 - t0;
        let k1 = eval(&x, &u_at(t0));
        let x2: Vec<Var<'t>> = x.iter().zip(&k1).map(|(&a, &k)| a + k * (dt / 2.0)).collect();
        let k2 = eval(&x2, &u_at(t0 + dt / 2.0));
        let x3: Vec<Var<'t>> = x.iter().zip(&k2).map(|(&a, &k)| a + k * (dt / 2.0)).collect();
        let k3 = eval(&x3, &u_at(t0 + dt / 2.0));
        let x4: Vec<Var<'t>> = x.iter().zip(&k3).map(|(&a, &k)| a + k * dt).collect();
        let k4 = eval(&x4, &u_at(t1));
        x = x
            .iter()
            .zip(k1.iter().zip(k2.iter().zip(k3.iter().zip(&k4))))
            .map(|(&xi, (&a, (&b, (&c, &dd))))| xi + (a + (b + c) * 2.0 + dd) * (dt / 6.0))
            .collect();
        rows.push(x.clone());
    }
    rows
}

/// RK4 rollout of the learned dynamics from `x0` under `controls` on the
/// shared grid; row 0 is `x0` exactly.
pub fn predict_trajectory(
    params: &MlpParams,
    x0: &[f64],
    controls: &Mat,
    times: &[f64],
) -> Result<Mat, SysIdError> {
    if x0.len() != params.shape.output {
        return Err(SysIdError::WidthMismatch {
            expected: params.shape.output,
            got: x0.len(),
        });
    }
    if x0.len() + controls.cols() != params.shape.input {
        return Err(SysIdError::WidthMismatch {
            expected: params.shape.input,
            got: x0.len() + controls.cols(),
        });
    }
    let tape = Tape::new();
    let pv = tape.vars(&params.flat);
    let rows = predict_vars(&params.shape, &pv, x0, controls, times, &tape);
    let mut out = Mat::zeros(times.len(), x0.len());
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let val = v.value();
            if !val.is_finite() {
                return Err(SysIdError::Blowup);
            }
            out[(i, j)] = val;
        }
    }
    Ok(out)
}

/// Trajectory-matching loss: the squared Euclidean norm of the difference,
/// divided by `N * D` where `N` is the number of timesteps (rows minus one)
/// and `D` the state dimension. All rows enter the sum, including the
/// exactly-known initial row.
pub fn mse_loss(predicted: &Mat, observed: &Mat) -> Result<f64, SysIdError> {
    if predicted.rows() != observed.rows() || predicted.cols() != observed.cols() {
        return Err(SysIdError::BadConfig("mse_loss shapes must match"));
    }
    if predicted.rows() < 2 || predicted.cols() == 0 {
        return Err(SysIdError::BadConfig("mse_loss needs at least two rows"));
    }
    let n = predicted.rows() - 1;
    let d = predicted.cols();
    let sum: f64 = predicted
        .data()
        .iter()
        .zip(observed.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / (n * d) as f64)
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            steps: 1000,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// Mean minibatch loss per step.
    pub loss: Vec<f64>,
    /// Episodes dropped from a step because their prediction blew up.
    pub blowups: usize,
}

/// Minibatch gradient descent with momentum on the mean per-episode
/// trajectory-matching loss. Each episode's loss graph is recorded once and
/// replayed per step. Returns the best-loss parameters seen and the
/// per-step loss history.
pub fn train_sysid(
    dataset: &SysIdDataset,
    hidden: Vec<usize>,
    state_dim: usize,
    control_dim: usize,
    cfg: &TrainConfig,
) -> Result<(MlpParams, TrainHistory), SysIdError> {
    if dataset.episodes.is_empty() {
        return Err(SysIdError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(SysIdError::BadConfig("batch_size must be >= 1"));
    }
    let shape = MlpShape::new(state_dim, control_dim, hidden);
    let mut params = MlpParams::init(shape.clone(), cfg.seed);
    let n_params = params.flat.len();

    // One recorded loss graph per episode: inputs are the parameters,
    // output the episode's trajectory-matching loss.
    let mut programs: Vec<Recording> = Vec::with_capacity(dataset.episodes.len());
    for ep in &dataset.episodes {
        let shape_c = shape.clone();
        let x0: Vec<f64> = ep.observed.row(0).to_vec();
        let controls = ep.controls.clone();
        let observed = ep.observed.clone();
        let times = dataset.times.clone();
        let rec = Recording::record(
            move |tape, pv| {
                let rows = predict_vars(&shape_c, pv, &x0, &controls, &times, tape);
                let n = rows.len() - 1;
                let d = shape_c.output;
                let mut sum = tape.constant(0.0);
                for (i, row) in rows.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        let e = v - observed[(i, j)];
                        sum = sum + e * e;
                    }
                }
                vec![sum / (n * d) as f64]
            },
            &params.flat,
        )?;
        programs.push(rec);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5de3_bd1c_9f1a_77u64);
    let mut order: Vec<usize> = (0..dataset.episodes.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    let mut velocity = vec![0.0f64; n_params];
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, params.flat.clone());

    for _ in 0..cfg.steps {
        let mut grad = vec![0.0f64; n_params];
        let mut loss_acc = 0.0;
        let mut used = 0usize;
        for _ in 0..cfg.batch_size.min(order.len()) {
            if cursor >= order.len() {
                // deterministic reshuffle per epoch
                for i in (1..order.len()).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            let e = order[cursor];
            cursor += 1;
            let rec = &mut programs[e];
            if rec.replay(&params.flat).is_err() {
                history.blowups += 1;
                continue;
            }
            let loss = rec.output(0);
            if !loss.is_finite() {
                history.blowups += 1;
                continue;
            }
            let g = rec.gradient(0);
            if g.iter().any(|v| !v.is_finite()) {
                history.blowups += 1;
                continue;
            }
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi;
            }
            loss_acc += loss;
            used += 1;
        }
        if used == 0 {
            history.loss.push(f64::NAN);
            continue;
        }
        let inv = 1.0 / used as f64;
        let step_loss = loss_acc * inv;
        history.loss.push(step_loss);
        if step_loss < best.0 {
            best = (step_loss, params.flat.clone());
        }
        for ((p, v), g) in params.flat.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v - cfg.learning_rate * g * inv;
            *p += *v;
        }
    }
    if best.0.is_finite() {
        params.flat = best.1;
    }
    Ok((params, history))
}

// ---------------------------------------------------------------------------
// Vector-field comparison.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VectorFieldRow {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub true_dx: Vec<f64>,
    pub learned_dx: Vec<f64>,
    pub abs_err: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct VectorFieldReport {
    pub rows: Vec<VectorFieldRow>,
}

impl VectorFieldReport {
    /// Mean absolute error over all rows and state dimensions.
    pub fn mean_abs_error(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in &self.rows {
            for e in &r.abs_err {
                sum += e;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Evaluate true and learned dynamics over the Cartesian product of
/// per-dimension state values and a list of control levels.
pub fn vector_field_report(
    params: &MlpParams,
    sys: &ControlSystem,
    state_grid: &[Vec<f64>],
    control_levels: &[Vec<f64>],
) -> Result<VectorFieldReport, SysIdError> {
    if state_grid.len() != sys.state_dim {
        return Err(SysIdError::BadConfig("state_grid needs one axis per state dim"));
    }
    let mut report = VectorFieldReport::default();
    let mut idx = vec![0usize; sys.state_dim];
    loop {
        let x: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(d, &i)| state_grid[d][i])
            .collect();
        for u in control_levels {
            if u.len() != sys.control_dim {
                return Err(SysIdError::BadConfig("control level has wrong width"));
            }
            let true_dx = sys.dynamics_value(&x, u);
            let learned_dx = neural_dynamics(params, &x, u)?;
            let abs_err = true_dx
                .iter()
                .zip(&learned_dx)
                .map(|(a, b)| (a - b).abs())
                .collect();
            report.rows.push(VectorFieldRow {
                x: x.clone(),
                u: u.clone(),
                true_dx: true_dx.clone(),
                learned_dx,
                abs_err,
            });
        }
        // advance the odometer
        let mut d = 0;
        loop {
            if d == sys.state_dim {
                return Ok(report);
            }
            idx[d] += 1;
            if idx[d] < state_grid[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::sync::Arc;
    use crate::ad;
    use crate::systems::{make_system, QuadraticCost};
    use alloc::collections::BTreeMap;
    use approx::assert_relative_eq;

    fn linear_controlled() -> ControlSystem {
        // x' = 0.5 x + 0.3 u
        struct Lin;
        impl Dynamics for Lin {
            fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], u: &[Var<'t>]) -> Vec<Var<'t>> {
                vec![x[0] * 0.5 + u[0] * 0.3]
            }
        }
        ControlSystem::new(
            "linear",
            1,
            1,
            Arc::new(Lin),
            Arc::new(QuadraticCost {
                x_weights: vec![1.0],
                u_weights: vec![1.0],
            }),
            (0.0, 2.0),
            vec![1.0],
        )
        .unwrap()
        .with_control_bounds(vec![(-1.0, 1.0)])
        .unwrap()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let p = MlpParams::zeros(MlpShape::new(2, 1, vec![8]));
        let out = neural_dynamics(&p, &[0.3, -0.7], &[0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_layer_is_affine_map() {
        // no hidden layers: out = W [x, u] + b
        let shape = MlpShape::new(1, 1, vec![]);
        let p = MlpParams {
            shape,
            flat: vec![2.0, -3.0, 0.25], // W = [2, -3], b = 0.25
        };
        let out = neural_dynamics(&p, &[1.5], &[0.5]).unwrap();
        assert_relative_eq!(out[0], 2.0 * 1.5 - 3.0 * 0.5 + 0.25, max_relative = 1e-15);
    }

    #[test]
    fn two_hidden_net_matches_independent_forward() {
        let shape = MlpShape::new(1, 1, vec![3, 2]);
        let p = MlpParams::init(shape.clone(), 42);
        let (x, u) = (0.4, -0.2);
        let got = neural_dynamics(&p, &[x], &[u]).unwrap();
        // independent plain-f64 forward pass
        let w = shape.widths();
        let mut act = vec![x, u];
        let mut off = 0;
        for l in 0..w.len() - 1 {
            let (ni, no) = (w[l], w[l + 1]);
            let mut next = vec![0.0; no];
            for r in 0..no {
                let mut z = p.flat[off + ni * no + r];
                for (c, &a) in act.iter().enumerate() {
                    z += p.flat[off + r * ni + c] * a;
                }
                next[r] = if l + 1 < w.len() - 1 {
                    crate::math::tanh(z)
                } else {
                    z
                };
            }
            off += ni * no + no;
            act = next;
        }
        assert_relative_eq!(got[0], act[0], max_relative = 1e-14);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let p = MlpParams::zeros(MlpShape::new(2, 1, vec![4]));
        assert!(matches!(
            neural_dynamics(&p, &[1.0], &[0.0]),
            Err(SysIdError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn dataset_zero_noise_matches_clean_rollout() {
        let sys = make_system("mould-fungicide", &BTreeMap::new()).unwrap();
        let ds = generate_dataset(
            &sys,
            &ControlStrategy::GaussianRandomWalk { walk_sigma: 0.1 },
            2,
            10,
            0.0,
            7,
        )
        .unwrap();
        for ep in &ds.episodes {
            let spline = ControlSpline::uniform(
                ep.controls.clone(),
                sys.t_start,
                sys.t_final,
                InterpScheme::PiecewiseLinear,
            )
            .unwrap();
            let (traj, _) = rollout(IntegratorKind::Rk4, &sys, &spline, 10).unwrap();
            assert_eq!(ep.observed, traj.states);
        }
    }

    #[test]
    fn dataset_is_deterministic_in_seed() {
        let sys = make_system("mould-fungicide", &BTreeMap::new()).unwrap();
        let s = ControlStrategy::UniformRandom;
        let a = generate_dataset(&sys, &s, 3, 8, 0.05, 99).unwrap();
        let b = generate_dataset(&sys, &s, 3, 8, 0.05, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&sys, &s, 3, 8, 0.05, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_respects_bounds_and_requires_them() {
        let sys = make_system("mould-fungicide", &BTreeMap::new()).unwrap();
        let ds = generate_dataset(&sys, &ControlStrategy::UniformRandom, 4, 12, 0.0, 3).unwrap();
        for ep in &ds.episodes {
            for v in ep.controls.data() {
                assert!((0.0..=1.0).contains(v));
            }
        }
        let free = linear_controlled();
        let mut no_bounds = free.clone();
        no_bounds.control_bounds = None;
        assert!(matches!(
            generate_dataset(&no_bounds, &ControlStrategy::UniformRandom, 1, 4, 0.0, 0),
            Err(SysIdError::MissingBounds)
        ));
    }

    #[test]
    fn around_candidate_stays_near() {
        let sys = make_system("mould-fungicide", &BTreeMap::new()).unwrap();
        let candidate = Mat::from_vec(9, 1, vec![0.5; 9]);
        let ds = generate_dataset(
            &sys,
            &ControlStrategy::AroundCandidate {
                candidate,
                walk_sigma: 0.01,
            },
            2,
            8,
            0.0,
            5,
        )
        .unwrap();
        for ep in &ds.episodes {
            for v in ep.controls.data() {
                assert!((v - 0.5).abs() < 0.1);
            }
        }
    }

    #[test]
    fn predict_zero_net_is_constant() {
        let p = MlpParams::zeros(MlpShape::new(2, 0, vec![4]));
        let times: Vec<f64> = (0..6).map(|i| i as f64 * 0.2).collect();
        let traj = predict_trajectory(&p, &[1.0, -2.0], &Mat::zeros(6, 0), &times).unwrap();
        for i in 0..6 {
            assert_eq!(traj.row(i), &[1.0, -2.0]);
        }
    }

    #[test]
    fn predict_linear_net_matches_exponential() {
        // net(x) = x replicates x' = x
        let p = MlpParams {
            shape: MlpShape::new(1, 0, vec![]),
            flat: vec![1.0, 0.0],
        };
        let times: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let traj = predict_trajectory(&p, &[1.0], &Mat::zeros(11, 0), &times).unwrap();
        for (i, &t) in times.iter().enumerate() {
            assert_relative_eq!(traj[(i, 0)], crate::math::exp(t), max_relative = 1e-6);
        }
    }

    #[test]
    fn mse_examples() {
        let a = Mat::from_vec(3, 2, vec![1.0; 6]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = Mat::from_vec(3, 2, vec![2.0; 6]);
        // ((N+1) D) / (N D) = (N+1)/N with N = 2
        assert_relative_eq!(mse_loss(&b, &a).unwrap(), 1.5, max_relative = 1e-15);
        // brute-force oracle on an arbitrary pair
        let p = Mat::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]);
        let q = Mat::from_vec(2, 2, vec![-0.5, 0.0, 1.0, 0.5]);
        let mut brute = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                brute += (p[(i, j)] - q[(i, j)]) * (p[(i, j)] - q[(i, j)]);
            }
        }
        assert_relative_eq!(mse_loss(&p, &q).unwrap(), brute / 2.0, max_relative = 1e-15);
        assert_eq!(mse_loss(&p, &q).unwrap(), mse_loss(&q, &p).unwrap());
    }

    #[test]
    fn training_gradient_matches_finite_differences() {
        let sys = linear_controlled();
        let ds = generate_dataset(
            &sys,
            &ControlStrategy::GaussianRandomWalk { walk_sigma: 0.2 },
            1,
            2,
            0.0,
            11,
        )
        .unwrap();
        let shape = MlpShape::new(1, 1, vec![2]);
        let theta = MlpParams::init(shape.clone(), 5);
        let ep = &ds.episodes[0];
        let x0 = ep.observed.row(0).to_vec();
        let controls = ep.controls.clone();
        let observed = ep.observed.clone();
        let times = ds.times.clone();
        let f = ad::scalar_fn(move |tape: &Tape, pv: &[Var<'_>]| {
            let rows = predict_vars(&shape, pv, &x0, &controls, &times, tape);
            let mut sum = tape.constant(0.0);
            for (i, row) in rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    let e = v - observed[(i, j)];
                    sum = sum + e * e;
                }
            }
            sum / ((rows.len() - 1) * 1) as f64
        });
        let (_, g) = ad::gradient(&f, &theta.flat).unwrap();
        let fd = ad::fd_gradient(&f, &theta.flat, 1e-6);
        for i in 0..g.len() {
            let denom = fd[i].abs().max(1.0);
            assert!(
                (g[i] - fd[i]).abs() / denom < 1e-4,
                "param {i}: {} vs {}",
                g[i],
                fd[i]
            );
        }
    }

    #[test]
    fn training_loss_decreases_on_clean_data() {
        let sys = linear_controlled();
        let ds = generate_dataset(
            &sys,
            &ControlStrategy::GaussianRandomWalk { walk_sigma: 0.2 },
            4,
            8,
            0.0,
            21,
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            momentum: 0.0,
            steps: 10,
            batch_size: 4,
            seed: 1,
        };
        let (_, hist) = train_sysid(&ds, vec![], 1, 1, &cfg).unwrap();
        assert_eq!(hist.blowups, 0);
        for w in hist.loss.windows(2) {
            assert!(w[1] < w[0], "loss must strictly decrease: {:?}", hist.loss);
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let sys = linear_controlled();
        let ds = generate_dataset(
            &sys,
            &ControlStrategy::GaussianRandomWalk { walk_sigma: 0.2 },
            2,
            5,
            0.0,
            2,
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            momentum: 0.9,
            steps: 5,
            batch_size: 2,
            seed: 3,
        };
        let init = MlpParams::init(MlpShape::new(1, 1, vec![4]), cfg.seed);
        let (params, hist) = train_sysid(&ds, vec![4], 1, 1, &cfg).unwrap();
        assert_eq!(params.flat, init.flat);
        let first = hist.loss[0];
        for l in &hist.loss {
            assert_eq!(*l, first);
        }
    }

    #[test]
    fn linear_generator_recovery() {
        // quick version of the round trip: fit a linear net to noise-free
        // data from x' = 0.5 x + 0.3 u and read the coefficients back
        let sys = linear_controlled();
        let ds = generate_dataset(
            &sys,
            &ControlStrategy::GaussianRandomWalk { walk_sigma: 0.3 },
            6,
            10,
            0.0,
            13,
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 5e-2,
            momentum: 0.9,
            steps: 2000,
            batch_size: 6,
            seed: 4,
        };
        let (params, _) = train_sysid(&ds, vec![], 1, 1, &cfg).unwrap();
        assert_relative_eq!(params.flat[0], 0.5, max_relative = 0.05);
        assert_relative_eq!(params.flat[1], 0.3, max_relative = 0.05);
        assert!(params.flat[2].abs() < 0.03, "bias {} should vanish", params.flat[2]);
    }

    #[test]
    fn vector_field_report_oracle_injection() {
        let sys = linear_controlled();
        // a linear net that IS the true dynamics
        let exact = MlpParams {
            shape: MlpShape::new(1, 1, vec![]),
            flat: vec![0.5, 0.3, 0.0],
        };
        let grid = vec![vec![0.0, 0.5, 1.0, 1.5]];
        let levels = vec![vec![0.0], vec![0.5], vec![1.0]];
        let rep = vector_field_report(&exact, &sys, &grid, &levels).unwrap();
        assert_eq!(rep.rows.len(), 12);
        assert_eq!(rep.mean_abs_error(), 0.0);
        // zero net: error equals |true dynamics| pointwise
        let zero = MlpParams::zeros(MlpShape::new(1, 1, vec![]));
        let rep0 = vector_field_report(&zero, &sys, &grid, &levels).unwrap();
        for row in &rep0.rows {
            assert_eq!(row.abs_err[0], row.true_dx[0].abs());
        }
    }
}
