//! Experiment drivers: wire a parsed config into the library and write the
//! run artifacts.

use std::path::Path;

use anyhow::{anyhow, bail, Result};
use otk_core::e2e::{self, E2eConfig, OuterOptimizer};
use otk_core::indirect::{fbsm_solve, FbsmConfig, IndirectError};
use otk_core::integrate::{rollout, rollout_from, ControlSpline, IntegratorKind, InterpScheme};
use otk_core::linalg::Mat;
use otk_core::solve::{solve_nlp, SolveReport};
use otk_core::systems::{make_system, ControlSystem, Trajectory};
use otk_core::sysid::{
    generate_dataset, train_sysid, vector_field_report, ControlStrategy, TrainConfig,
};
use otk_core::transcribe::{
    hermite_simpson_collocation, multiple_shooting, single_shooting, trapezoidal_collocation,
    NlpProblem, ShootingConfig,
};

use crate::config::{
    Config, ExperimentKind, OptimizerName, StrategyName, TranscribeMethod, TranscribeSection,
};
use crate::outputs::{self, RunDir};

/// Exit status per the contract: 0 converged/completed, 2 budget exhausted.
pub enum RunStatus {
    Converged,
    BudgetExhausted,
}

impl RunStatus {
    pub fn code(&self) -> i32 {
        match self {
            RunStatus::Converged => 0,
            RunStatus::BudgetExhausted => 2,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::BudgetExhausted => "budget-exhausted",
        }
    }
}

pub fn run(
    cfg: &Config,
    config_path: &Path,
    config_echo: &str,
    out_dir: &Path,
    overwrite: bool,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<RunStatus> {
    let seed = seed_override.or(cfg.experiment.seed);
    let mut dir = RunDir::create(out_dir, overwrite)?;
    let status = match cfg.experiment.kind {
        ExperimentKind::Plan => run_plan(cfg, &mut dir, quiet)?,
        ExperimentKind::Fbsm => run_fbsm(cfg, &mut dir, quiet)?,
        ExperimentKind::Sysid => run_sysid(cfg, &mut dir, seed, quiet)?,
        ExperimentKind::E2e => run_e2e(cfg, &mut dir, seed, quiet)?,
        ExperimentKind::IntegratorStudy => run_integrator_study(&mut dir)?,
    };
    dir.finish(
        config_path,
        config_echo,
        cfg.experiment.kind.name(),
        seed,
        status.label(),
    )?;
    Ok(status)
}

fn build_system(cfg: &Config) -> Result<ControlSystem> {
    let env = cfg
        .environment
        .as_ref()
        .ok_or_else(|| anyhow!("environment: section required"))?;
    make_system(&env.name, &env.overrides).map_err(|e| anyhow!("environment: {e}"))
}

fn transcribe(sys: &ControlSystem, t: &TranscribeSection) -> Result<NlpProblem> {
    let mut sc = ShootingConfig::new(t.n_controls, t.n_intervals)
        .with_integrator(t.integrator.into())
        .with_steps_per_interval(t.steps_per_interval);
    sc.interpolation = t.interpolation.resolve();
    sc.enforce_state_bounds = t.enforce_state_bounds;
    let p = match t.method {
        TranscribeMethod::SingleShooting => single_shooting(sys, &sc),
        TranscribeMethod::MultipleShooting => multiple_shooting(sys, &sc),
        TranscribeMethod::Trapezoidal => trapezoidal_collocation(sys, t.n_segments),
        TranscribeMethod::HermiteSimpson => hermite_simpson_collocation(sys, t.n_segments),
    };
    p.map_err(|e| anyhow!("transcribe: {e}"))
}

/// Reconstruct a full-resolution trajectory from a solved decision vector.
fn solution_trajectory(
    sys: &ControlSystem,
    p: &NlpProblem,
    t: &TranscribeSection,
    y: &[f64],
) -> Result<Trajectory> {
    let (free, states, controls) = p.layout.unravel(y);
    match t.method {
        TranscribeMethod::SingleShooting | TranscribeMethod::MultipleShooting => {
            // roll the whole horizon under the solved controls from the
            // (possibly free) start state
            let mut x0 = sys.x_start.clone();
            match t.method {
                TranscribeMethod::SingleShooting => {
                    for (k, &dim) in sys.free_start.iter().enumerate() {
                        x0[dim] = free[k];
                    }
                }
                _ => {
                    // multiple shooting: the first boundary node is the start
                    x0.copy_from_slice(states.row(0));
                }
            }
            let scheme = t
                .interpolation
                .resolve()
                .unwrap_or_else(|| IntegratorKind::from(t.integrator).default_interpolation());
            let spline = ControlSpline::new(controls, p.control_times.clone(), scheme)
                .map_err(|e| anyhow!("trajectory: {e}"))?;
            let n_steps = (t.n_controls - 1) * t.steps_per_interval;
            let (traj, _) = rollout_from(t.integrator.into(), sys, &x0, &spline, n_steps)
                .map_err(|e| anyhow!("trajectory: {e}"))?;
            Ok(traj)
        }
        TranscribeMethod::Trapezoidal | TranscribeMethod::HermiteSimpson => {
            // node values are the solution; sample controls at state nodes
            let m = sys.control_dim;
            let mut u = Mat::zeros(p.state_times.len(), m);
            for (i, &ti) in p.state_times.iter().enumerate() {
                // control nodes are a superset of state nodes
                let k = p
                    .control_times
                    .iter()
                    .position(|&tc| (tc - ti).abs() < 1e-12)
                    .unwrap_or(i);
                u.row_mut(i).copy_from_slice(controls.row(k));
            }
            Trajectory::new(p.state_times.clone(), states, u).map_err(|e| anyhow!("trajectory: {e}"))
        }
    }
}

fn run_plan(cfg: &Config, dir: &mut RunDir, quiet: bool) -> Result<RunStatus> {
    let sys = build_system(cfg)?;
    let t = cfg
        .transcribe
        .as_ref()
        .ok_or_else(|| anyhow!("transcribe: section required for `plan`"))?;
    let p = transcribe(&sys, t)?;
    let scfg = cfg.solve.clone().unwrap_or_default().to_solver_config();
    let report: SolveReport = solve_nlp(&p, &scfg).map_err(|e| anyhow!("solve: {e}"))?;
    if !quiet {
        eprintln!(
            "plan: {} iterations, f = {:.6e}, |h|_inf = {:.3e}, kkt = {:.3e}, converged = {}",
            report.iterations, report.f, report.h_inf, report.grad_inf, report.converged
        );
    }
    let traj = solution_trajectory(&sys, &p, t, &report.y)?;
    dir.write("trajectory.csv", &outputs::trajectory_csv(&traj))?;
    dir.write("solver_diagnostics.csv", &outputs::diagnostics_csv(&report.diagnostics))?;
    if !report.snapshots.is_empty() {
        let mut snaps = Vec::new();
        for (iter, y) in &report.snapshots {
            snaps.push((*iter, solution_trajectory(&sys, &p, t, y)?));
        }
        dir.write("snapshots.csv", &outputs::snapshots_csv(&snaps))?;
    }
    Ok(if report.converged {
        RunStatus::Converged
    } else {
        RunStatus::BudgetExhausted
    })
}

fn run_fbsm(cfg: &Config, dir: &mut RunDir, quiet: bool) -> Result<RunStatus> {
    let sys = build_system(cfg)?;
    let f = cfg.fbsm.clone().unwrap_or_default();
    let fcfg = FbsmConfig {
        n_steps: f.n_steps,
        max_sweeps: f.max_sweeps,
        tol: f.tol,
        relaxation: f.relaxation,
        inner_steps: f.inner_steps,
        inner_step_size: f.inner_step_size,
    };
    match fbsm_solve(&sys, &fcfg) {
        Ok((traj, diag)) => {
            if !quiet {
                eprintln!(
                    "fbsm: converged in {} sweeps, final cost {:.6e}",
                    diag.sweeps,
                    diag.cost.last().copied().unwrap_or(f64::NAN)
                );
            }
            dir.write("trajectory.csv", &outputs::trajectory_csv(&traj))?;
            let mut csv = String::from("sweep,control_change,cost\n");
            for (i, (c, k)) in diag.control_change.iter().zip(&diag.cost).enumerate() {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    i + 1,
                    outputs::fmt_float(*c),
                    outputs::fmt_float(*k)
                ));
            }
            dir.write("fbsm_diagnostics.csv", &csv)?;
            Ok(RunStatus::Converged)
        }
        Err(IndirectError::NotConverged { sweeps, last_change }) => {
            if !quiet {
                eprintln!("fbsm: no convergence after {sweeps} sweeps (last change {last_change:.3e})");
            }
            Ok(RunStatus::BudgetExhausted)
        }
        Err(e) => Err(anyhow!("fbsm: {e}")),
    }
}

fn run_sysid(cfg: &Config, dir: &mut RunDir, seed: Option<u64>, quiet: bool) -> Result<RunStatus> {
    let sys = build_system(cfg)?;
    let s = cfg
        .sysid
        .as_ref()
        .ok_or_else(|| anyhow!("sysid: section required for `sysid`"))?;
    let seed = seed.ok_or_else(|| anyhow!("experiment.seed: required for `sysid`"))?;
    let strategy = match s.strategy {
        StrategyName::UniformRandom => ControlStrategy::UniformRandom,
        StrategyName::GaussianRandomWalk => ControlStrategy::GaussianRandomWalk {
            walk_sigma: s.walk_sigma,
        },
    };
    let dataset = generate_dataset(&sys, &strategy, s.n_episodes, s.n_steps, s.noise_sigma, seed)
        .map_err(|e| anyhow!("sysid: {e}"))?;
    for (i, ep) in dataset.episodes.iter().enumerate() {
        dir.write(
            &format!("episode_{i:03}.csv"),
            &outputs::episode_csv(&dataset.times, &ep.controls, &ep.observed),
        )?;
    }
    let tcfg = TrainConfig {
        learning_rate: s.learning_rate,
        momentum: s.momentum,
        steps: s.train_steps,
        batch_size: s.batch_size,
        seed,
    };
    let (params, history) =
        train_sysid(&dataset, s.hidden.clone(), sys.state_dim, sys.control_dim, &tcfg)
            .map_err(|e| anyhow!("sysid: {e}"))?;
    if !quiet {
        eprintln!(
            "sysid: {} steps, final loss {:.6e}, {} blow-ups",
            history.loss.len(),
            history.loss.last().copied().unwrap_or(f64::NAN),
            history.blowups
        );
    }
    dir.write("loss_history.csv", &outputs::loss_csv(&history.loss))?;
    dir.write("params.json", &outputs::params_json(&params)?)?;

    if !s.vf_state_min.is_empty() {
        let mut grid = Vec::new();
        for ((&lo, &hi), &count) in s
            .vf_state_min
            .iter()
            .zip(&s.vf_state_max)
            .zip(&s.vf_state_count)
        {
            if count < 2 {
                bail!("sysid.vf_state_count: each axis needs at least 2 samples");
            }
            grid.push(
                (0..count)
                    .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
                    .collect::<Vec<f64>>(),
            );
        }
        let report = vector_field_report(&params, &sys, &grid, &s.vf_control_levels)
            .map_err(|e| anyhow!("sysid: {e}"))?;
        if !quiet {
            eprintln!("sysid: vector-field mean abs error {:.6e}", report.mean_abs_error());
        }
        dir.write("vector_field.csv", &outputs::vector_field_csv(&report))?;
    }
    Ok(RunStatus::Converged)
}

fn run_e2e(cfg: &Config, dir: &mut RunDir, seed: Option<u64>, quiet: bool) -> Result<RunStatus> {
    let sys = build_system(cfg)?;
    let e = cfg
        .e2e
        .as_ref()
        .ok_or_else(|| anyhow!("e2e: section required for `e2e`"))?;
    let seed = seed.ok_or_else(|| anyhow!("experiment.seed: required for `e2e`"))?;
    let setup = e2e::neural_single_shooting(&sys, e.hidden.clone(), e.n_controls, e.steps_per_interval)
        .map_err(|err| anyhow!("e2e: {err}"))?;

    // plan-on-truth expert: solve the same planning problem with the true
    // dynamics substituted for the model
    let expert_states = {
        let solve_section = cfg.solve.clone().unwrap_or_default();
        let mut scfg = solve_section.to_solver_config();
        scfg.max_iters = e.expert_max_iters;
        let sc = ShootingConfig::new(e.n_controls, 1).with_steps_per_interval(e.steps_per_interval);
        let true_planner = single_shooting(&sys, &sc).map_err(|err| anyhow!("e2e: {err}"))?;
        let rep = solve_nlp(&true_planner, &scfg).map_err(|err| anyhow!("e2e expert: {err}"))?;
        if !rep.converged {
            bail!("e2e expert: plan-on-truth did not converge within {} iterations", e.expert_max_iters);
        }
        let scheme = InterpScheme::PiecewiseLinear;
        let (_, _, controls) = true_planner.layout.unravel(&rep.y);
        let spline = ControlSpline::new(controls, true_planner.control_times.clone(), scheme)
            .map_err(|err| anyhow!("e2e expert: {err}"))?;
        let n_steps = (e.n_controls - 1) * e.steps_per_interval;
        let (traj, _) = rollout(IntegratorKind::Rk4, &sys, &spline, n_steps)
            .map_err(|err| anyhow!("e2e expert: {err}"))?;
        traj.states
    };

    let ecfg = E2eConfig {
        k_steps: e.k_steps,
        reset_period: e.reset_period,
        outer_iters: e.outer_iters,
        outer_lr: e.outer_lr,
        outer_lr_decay: e.outer_lr_decay,
        outer_momentum: e.outer_momentum,
        outer_optimizer: match e.outer_optimizer {
            OptimizerName::Momentum => OuterOptimizer::Momentum,
            OptimizerName::Adam => OuterOptimizer::Adam,
        },
        eta_y: e.eta_y,
        eta_lambda: e.eta_lambda,
        seed,
    };
    let out = e2e::e2e_train(&setup, &expert_states, e.hidden.clone(), &ecfg)
        .map_err(|err| anyhow!("e2e: {err}"))?;
    if !quiet {
        eprintln!(
            "e2e: best loss {:.6e} at outer iteration {}, {} divergences",
            out.history.best_loss, out.history.best_iteration, out.history.divergences
        );
    }
    dir.write(
        "loss_history.csv",
        &outputs::outer_history_csv(&out.history.outer_loss, &out.history.grad_norm),
    )?;
    dir.write("params.json", &outputs::params_json(&out.params)?)?;
    dir.write(
        "controls.csv",
        &outputs::controls_csv(&setup.nlp.control_times, &out.controls),
    )?;
    let n_steps = (e.n_controls - 1) * e.steps_per_interval;
    let snaps = e2e::snapshot_controls(
        &out.history,
        e.snapshot_stride.max(1),
        &sys,
        &setup.nlp.control_times,
        n_steps,
    )
    .map_err(|err| anyhow!("e2e: {err}"))?;
    let snaps: Vec<(usize, Trajectory)> = snaps
        .into_iter()
        .map(|s| (s.outer_iteration, s.states))
        .collect();
    dir.write("snapshots.csv", &outputs::snapshots_csv(&snaps))?;
    // the best plan rolled out on the true system
    let spline = ControlSpline::new(
        out.controls.clone(),
        setup.nlp.control_times.clone(),
        InterpScheme::PiecewiseLinear,
    )
    .map_err(|err| anyhow!("e2e: {err}"))?;
    let (traj, _) =
        rollout(IntegratorKind::Rk4, &sys, &spline, n_steps).map_err(|err| anyhow!("e2e: {err}"))?;
    dir.write("trajectory.csv", &outputs::trajectory_csv(&traj))?;
    Ok(RunStatus::Converged)
}

fn run_integrator_study(dir: &mut RunDir) -> Result<RunStatus> {
    // global error on x' = x over [0, 1] against the analytic solution,
    // plus fitted convergence slopes
    use otk_core::ad::{Tape, Var};
    use otk_core::integrate::step;
    use otk_core::systems::Dynamics;
    use std::sync::Arc;

    struct Exp;
    impl Dynamics for Exp {
        fn eval<'t>(&self, _tape: &'t Tape, x: &[Var<'t>], _u: &[Var<'t>]) -> Vec<Var<'t>> {
            vec![x[0]]
        }
    }
    let rhs = otk_core::integrate::Autonomous(Arc::new(Exp));
    let spline = ControlSpline::uniform(
        Mat::zeros(2, 0),
        0.0,
        1.0,
        InterpScheme::PiecewiseConstant,
    )
    .map_err(|e| anyhow!("integrator-study: {e}"))?;
    let mut errors = String::from("integrator,steps,dt,abs_error\n");
    let mut orders = String::from("integrator,stages,slope\n");
    for kind in IntegratorKind::all() {
        let mut errs = Vec::new();
        for steps in [10usize, 20, 40, 80] {
            let dt = 1.0 / steps as f64;
            let mut x = vec![1.0];
            for s in 0..steps {
                x = step(kind, &rhs, &x, &spline, s as f64 * dt, dt)
                    .map_err(|e| anyhow!("integrator-study: {e}"))?;
            }
            let err = (x[0] - std::f64::consts::E).abs();
            errs.push(err);
            errors.push_str(&format!(
                "{},{},{},{}\n",
                kind.name(),
                steps,
                outputs::fmt_float(dt),
                outputs::fmt_float(err)
            ));
        }
        // least-squares slope of log2(error) against log2(dt)
        let slope = {
            let xs: Vec<f64> = [10.0f64, 20.0, 40.0, 80.0]
                .iter()
                .map(|s| -(s.log2()))
                .collect();
            let ys: Vec<f64> = errs.iter().map(|e| e.log2()).collect();
            let n = xs.len() as f64;
            let sx: f64 = xs.iter().sum();
            let sy: f64 = ys.iter().sum();
            let sxx: f64 = xs.iter().map(|v| v * v).sum();
            let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
            (n * sxy - sx * sy) / (n * sxx - sx * sx)
        };
        orders.push_str(&format!(
            "{},{},{}\n",
            kind.name(),
            kind.stages(),
            outputs::fmt_float(slope)
        ));
    }
    dir.write("convergence.csv", &errors)?;
    dir.write("orders.csv", &orders)?;
    Ok(RunStatus::Converged)
}

pub fn list_catalog() -> String {
    let mut out = String::new();
    out.push_str("environments:\n");
    for info in otk_core::systems::catalog() {
        out.push_str(&format!(
            "  {:<20} D={} M={}  fixed terminal state: {:<3}  terminal cost: {:<3}  {}\n",
            info.name,
            info.state_dim,
            info.control_dim,
            if info.fixed_terminal { "yes" } else { "no" },
            if info.terminal_cost { "yes" } else { "no" },
            info.description,
        ));
    }
    out.push_str("\ntrajectory optimizers:\n");
    out.push_str("  single-shooting              direct, sequential, any integrator\n");
    out.push_str("  multiple-shooting            direct, partially parallel, any integrator\n");
    out.push_str("  trapezoidal-collocation      direct, parallel, trapezoidal rule\n");
    out.push_str("  hermite-simpson-collocation  direct, parallel, simpson's rule\n");
    out.push_str("  forward-backward-sweep       indirect, sequential, runge-kutta 4th order\n");
    out.push_str("\nexplicit integrators:\n");
    for kind in IntegratorKind::all() {
        out.push_str(&format!(
            "  {:<9} explicit, {} derivative evaluation(s) per step\n",
            kind.name(),
            kind.stages()
        ));
    }
    out.push_str("\nnlp solvers:\n");
    out.push_str("  gda            simultaneous gradient descent-ascent on the Lagrangian\n");
    out.push_str("  extragradient  lookahead gradients applied to the current iterate\n");
    out
}
