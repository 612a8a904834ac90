//! Closed-loop evaluation of solved trajectories, success criteria, and the
//! a-posteriori error bound.

use std::time::Instant;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{RobotModel, StatePoint};
use crate::error::{AghfError, Result};
use crate::flow::{Problem, PhaseSolution, Trajectory};
use crate::lagrangian::{ConstraintKind, ConstraintSpec};
use crate::ode::{self, Control, Method, StepControl};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub kp: f64,
    pub kv: f64,
    /// Terminal error threshold on `‖x(T) − xf‖∞`.
    pub epsilon: f64,
    /// Box bounds are inflated by this fraction of their magnitude.
    pub constraint_margin: f64,
    /// Sampling step of the closed-loop run and of all success checks.
    pub obstacle_dt: f64,
    /// Spacing of the emitted reference samples.
    pub dense_dt: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub divergence_norm: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            kp: 100.0,
            kv: 100.0,
            epsilon: 0.05,
            constraint_margin: 0.05,
            obstacle_dt: 1e-2,
            dense_dt: 1e-3,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            divergence_norm: 1e6,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("kp", self.kp),
            ("kv", self.kv),
            ("epsilon", self.epsilon),
            ("constraint_margin", self.constraint_margin),
            ("obstacle_dt", self.obstacle_dt),
            ("dense_dt", self.dense_dt),
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("divergence_norm", self.divergence_norm),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(AghfError::domain(format!("evaluation.{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Time-stamped reference states and open-loop controls.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSolution {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

impl DenseSolution {
    pub fn new(t: Vec<f64>, x: Vec<DVector<f64>>, u: Vec<DVector<f64>>) -> Result<Self> {
        if t.is_empty() || t.len() != x.len() || t.len() != u.len() {
            return Err(AghfError::domain("reference needs matching, nonempty time, state and control samples"));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(AghfError::domain("reference times must be strictly increasing"));
        }
        Ok(Self { t, x, u })
    }

    pub fn horizon(&self) -> f64 {
        *self.t.last().expect("nonempty")
    }

    /// Piecewise-linear interpolation of `(x, u)`, held constant outside the samples.
    pub fn at(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let last = self.t.len() - 1;
        if t <= self.t[0] {
            return (self.x[0].clone(), self.u[0].clone());
        }
        if t >= self.t[last] {
            return (self.x[last].clone(), self.u[last].clone());
        }
        let k = self.t.partition_point(|&s| s <= t) - 1;
        let a = (t - self.t[k]) / (self.t[k + 1] - self.t[k]);
        (
            &self.x[k] * (1.0 - a) + &self.x[k + 1] * a,
            &self.u[k] * (1.0 - a) + &self.u[k + 1] * a,
        )
    }
}

/// Uniform sample times `k dt`, `k = 0..=floor(T/dt)`.
pub fn sample_times(horizon: f64, dt: f64) -> Vec<f64> {
    let count = (horizon / dt * (1.0 + 1e-12)).floor() as usize + 1;
    (0..count).map(|k| (k as f64 * dt).min(horizon)).collect()
}

/// Interpolates the state and its spectral derivative to a uniform grid and
/// extracts the control at each sample.
pub fn extract_control_trajectory(model: &RobotModel, traj: &Trajectory, dense_dt: f64) -> Result<DenseSolution> {
    if !(dense_dt > 0.0) {
        return Err(AghfError::domain("dense_dt must be positive"));
    }
    let grid = traj.grid();
    let xdot = traj.derivative();
    let t = sample_times(traj.horizon(), dense_dt);
    let mut xs = Vec::with_capacity(t.len());
    let mut us = Vec::with_capacity(t.len());
    for &ti in &t {
        let x = grid.interpolate(traj.values(), ti)?;
        let xd = grid.interpolate(&xdot, ti)?;
        let u = model.extract_control(&StatePoint::from_state(x.as_slice()), &xd)?.u;
        xs.push(x);
        us.push(u);
    }
    DenseSolution::new(t, xs, us)
}

/// Closed-loop samples at the evaluation step.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    /// Applied input `u* + kp e + kv ė` at each sample.
    pub u: Vec<DVector<f64>>,
}

fn feedback(model: &RobotModel, reference: &DenseSolution, t: f64, x: &DVector<f64>, kp: f64, kv: f64, pinv: &Option<DMatrix<f64>>) -> DVector<f64> {
    let n = model.dof();
    let (xr, ur) = reference.at(t);
    let correction = (xr.rows(0, n) - x.rows(0, n)) * kp + (xr.rows(n, n) - x.rows(n, n)) * kv;
    match pinv {
        None => ur + correction,
        Some(p) => ur + p * correction,
    }
}

fn simulate(model: &RobotModel, reference: &DenseSolution, kp: f64, kv: f64, config: &EvaluationConfig) -> Result<ClosedLoop> {
    let n = model.dof();
    if reference.x[0].len() != 2 * n || reference.u[0].len() != model.num_inputs() {
        return Err(AghfError::domain("reference dimensions do not match the model"));
    }
    // Joint-space feedback is mapped through B⁺ when B is not the identity.
    let pinv = if model.is_fully_actuated() {
        None
    } else {
        Some(
            model
                .actuation()
                .clone()
                .pseudo_inverse(1e-12)
                .map_err(|e| AghfError::domain(e.to_string()))?,
        )
    };
    let rhs = |t: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
        let u = feedback(model, reference, t, x, kp, kv, &pinv);
        let q = x.rows(0, n).into_owned();
        let qd = x.rows(n, n).into_owned();
        let qdd = model.forward_dynamics(&q, &qd, &u)?;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&qd);
        out.rows_mut(n, n).copy_from(&qdd);
        Ok(out)
    };
    let control = StepControl {
        rel_tol: config.rel_tol,
        abs_tol: config.abs_tol,
        initial_step: config.obstacle_dt * 1e-2,
        max_steps: 1_000_000,
        ..Default::default()
    };
    let horizon = reference.horizon();
    let mut times = sample_times(horizon, config.obstacle_dt);
    if *times.last().expect("nonempty") < horizon {
        times.push(horizon);
    }
    let mut x = reference.x[0].clone();
    let mut out = ClosedLoop {
        t: vec![times[0]],
        u: vec![feedback(model, reference, times[0], &x, kp, kv, &pinv)],
        x: vec![x.clone()],
    };
    let mut step = control.initial_step;
    for w in times.windows(2) {
        let outcome = ode::integrate(
            Method::DormandPrince54,
            rhs,
            w[0],
            x,
            w[1],
            &StepControl { initial_step: step, ..control },
            |t, y, _| {
                let norm = y.amax();
                if !(norm <= config.divergence_norm) {
                    return Err(AghfError::Divergence { t, norm });
                }
                Ok(Control::Continue)
            },
        )?;
        if let Some(failure) = outcome.failure {
            return Err(AghfError::Divergence {
                t: outcome.t,
                norm: outcome.y.amax().max(if matches!(failure, ode::Failure::MaxSteps) { 0.0 } else { f64::INFINITY }),
            });
        }
        step = outcome.next_step.max(control.initial_step * 1e-3);
        x = outcome.y;
        out.u.push(feedback(model, reference, w[1], &x, kp, kv, &pinv));
        out.t.push(w[1]);
        out.x.push(x.clone());
    }
    Ok(out)
}

/// Integrates the dynamics under `u* + kp (q* − q) + kv (q̇* − q̇)` from the
/// reference initial state, sampling every `obstacle_dt`.
pub fn closed_loop_integrate(model: &RobotModel, reference: &DenseSolution, config: &EvaluationConfig) -> Result<ClosedLoop> {
    config.validate()?;
    simulate(model, reference, config.kp, config.kv, config)
}

/// Same as [`closed_loop_integrate`] without feedback.
pub fn open_loop_integrate(model: &RobotModel, reference: &DenseSolution, config: &EvaluationConfig) -> Result<ClosedLoop> {
    config.validate()?;
    simulate(model, reference, 0.0, 0.0, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub terminal_error: f64,
    pub terminal_ok: bool,
    /// Largest excess over an inflated box bound (`<= 0` passes); `None` without box constraints.
    pub box_excess: Option<f64>,
    pub constraints_ok: bool,
    /// Smallest `‖p − c‖ − r` over frames, obstacles and samples (`> 0` passes).
    pub obstacle_clearance: Option<f64>,
    pub obstacles_ok: bool,
    pub success: bool,
}

fn inflate(lower: f64, upper: f64, margin: f64) -> (f64, f64) {
    (lower - margin * lower.abs(), upper + margin * upper.abs())
}

fn box_excess(values: &[f64], lower: &[f64], upper: &[f64], margin: f64) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        let (lo, hi) = inflate(lower[i], upper[i], margin);
        if hi.is_finite() {
            worst = worst.max(v - hi);
        }
        if lo.is_finite() {
            worst = worst.max(lo - v);
        }
    }
    worst
}

/// Terminal error, inflated box bounds, and strict obstacle exteriors for every frame.
pub fn evaluate_success(
    model: &RobotModel,
    run: &ClosedLoop,
    constraints: &[ConstraintSpec],
    xf: &DVector<f64>,
    config: &EvaluationConfig,
) -> Verdict {
    let n = model.dof();
    let terminal_error = run.x.last().map_or(f64::INFINITY, |x| (x - xf).amax());
    let terminal_ok = terminal_error < config.epsilon;

    let mut excess: Option<f64> = None;
    let mut clearance: Option<f64> = None;
    for c in constraints {
        for (x, u) in run.x.iter().zip(&run.u) {
            let value = match &c.kind {
                ConstraintKind::StateBox(b) => box_excess(&x.as_slice()[..n], &b.lower, &b.upper, config.constraint_margin),
                ConstraintKind::VelocityBox(b) => box_excess(&x.as_slice()[n..], &b.lower, &b.upper, config.constraint_margin),
                ConstraintKind::InputBox(b) => box_excess(u.as_slice(), &b.lower, &b.upper, config.constraint_margin),
                ConstraintKind::CircleObstacle { center, radius, .. } => {
                    let q = x.rows(0, n).into_owned();
                    for p in model.forward_kinematics(&q) {
                        let d = ((p.x - center[0]).powi(2) + (p.y - center[1]).powi(2)).sqrt() - radius;
                        clearance = Some(clearance.map_or(d, |c: f64| c.min(d)));
                    }
                    continue;
                }
            };
            if value.is_finite() || value.is_nan() {
                excess = Some(excess.map_or(value, |e: f64| e.max(value)));
            }
        }
    }
    let constraints_ok = excess.is_none_or(|e| e <= 0.0);
    let obstacles_ok = clearance.is_none_or(|c| c > 0.0);
    Verdict {
        terminal_error,
        terminal_ok,
        box_excess: excess,
        constraints_ok,
        obstacle_clearance: clearance,
        obstacles_ok,
        success: terminal_ok && constraints_ok && obstacles_ok,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    UserSupplied,
    SampledEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub y1: f64,
    pub y2: f64,
    pub provenance: Provenance,
}

/// `sqrt(3 T C1 C2² / kd · exp(3 T (Y1² T + Y2² C3)))`.
pub fn theorem5_bound(c: &ErrorBoundConstants, horizon: f64, kd: f64) -> f64 {
    let t = horizon;
    (3.0 * t * c.c1 * c.c2 * c.c2 / kd * (3.0 * t * (c.y1 * c.y1 * t + c.y2 * c.y2 * c.c3)).exp()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    /// The sampling box is the trajectory's bounding box scaled about its
    /// centre by each ladder factor `0.25 k` up to this value.
    pub box_scale: f64,
    pub directions: usize,
    pub seed: u64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            box_scale: 1.5,
            directions: 16,
            seed: 0,
        }
    }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Sampled estimates of the constants in the error bound. Lipschitz constants
/// are Jacobian norms at the nodes and at seeded points in nested boxes, so
/// they are lower estimates of the global constants.
pub fn estimate_constants(model: &RobotModel, traj: &Trajectory, action: f64, options: &EstimateOptions) -> Result<ErrorBoundConstants> {
    let d = model.state_dim();
    let values = traj.values();
    let mut points: Vec<DVector<f64>> = (0..values.nrows()).map(|j| values.row(j).transpose()).collect();

    let lo = DVector::from_fn(d, |c, _| values.column(c).min());
    let hi = DVector::from_fn(d, |c, _| values.column(c).max());
    let center = (&lo + &hi) * 0.5;
    let half = ((&hi - &lo) * 0.5).map(|h| h.max(1e-3));
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let directions: Vec<DVector<f64>> = (0..options.directions)
        .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.0..=1.0)))
        .collect();
    let levels = (options.box_scale.max(0.0) * 4.0 + 1e-9).floor() as usize;
    for k in 1..=levels {
        let scale = 0.25 * k as f64;
        for z in &directions {
            points.push(&center + half.component_mul(z) * scale);
        }
    }

    let (mut y1, mut y2, mut c2) = (0.0f64, 0.0f64, 0.0f64);
    for x in &points {
        let sp = StatePoint::from_state(x.as_slice());
        let base = model.affine_decomposition(&sp)?;
        c2 = c2.max(spectral_norm(&base.complement));
        let mut jac_fd = DMatrix::zeros(d, d);
        let mut jac_f_sq = 0.0;
        for k in 0..d {
            let h = 1e-6 * (1.0 + x[k].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let dp = model.affine_decomposition(&StatePoint::from_state(xp.as_slice()))?;
            let dm = model.affine_decomposition(&StatePoint::from_state(xm.as_slice()))?;
            jac_fd.set_column(k, &((&dp.drift - &dm.drift) / (2.0 * h)));
            let df = (&dp.input - &dm.input) / (2.0 * h);
            jac_f_sq += df.norm_squared();
        }
        y1 = y1.max(spectral_norm(&jac_fd));
        y2 = y2.max(jac_f_sq.sqrt());
    }

    let xdot = traj.derivative();
    let integrand = (0..values.nrows())
        .map(|j| {
            let sp = StatePoint::from_state(values.row(j).transpose().as_slice());
            Ok(model.extract_control(&sp, &xdot.row(j).transpose())?.u.norm_squared())
        })
        .collect::<Result<Vec<_>>>()?;
    let c3 = traj.grid().quadrature(&integrand)?;

    Ok(ErrorBoundConstants {
        c1: 1.1 * action.max(0.0),
        c2,
        c3,
        y1,
        y2,
        provenance: Provenance::SampledEstimate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundEstimate {
    pub constants: ErrorBoundConstants,
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub phase1: f64,
    pub phase2: f64,
    pub evaluation: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: PhaseSolution,
    pub dense: DenseSolution,
    pub closed_loop: ClosedLoop,
    pub verdict: Verdict,
    pub action: f64,
    pub defect: f64,
    pub max_violation: f64,
    pub error_bound: ErrorBoundEstimate,
    pub timings: Timings,
}

/// Runs the evaluation pipeline on a finished two-phase solve.
pub fn build_report(problem: &Problem, solution: PhaseSolution, config: &EvaluationConfig, seed: u64) -> Result<SolveReport> {
    config.validate()?;
    let start = Instant::now();
    let model = &problem.model;
    let traj = &solution.trajectory;
    let dense = extract_control_trajectory(model, traj, config.dense_dt)?;
    let closed_loop = closed_loop_integrate(model, &dense, config)?;
    let verdict = evaluate_success(model, &closed_loop, &problem.phase2.spec.constraints, &problem.xf, config);
    let last = solution.phase2.trace.last().copied().expect("trace has an initial sample");
    let constants = estimate_constants(model, traj, last.action, &EstimateOptions { seed, ..Default::default() })?;
    let error_bound = ErrorBoundEstimate {
        bound: theorem5_bound(&constants, problem.horizon, problem.phase2.spec.kd),
        constants,
    };
    let timings = Timings {
        phase1: solution.phase1.as_ref().map_or(0.0, |r| r.trace.wall_time),
        phase2: solution.phase2.trace.wall_time,
        evaluation: start.elapsed().as_secs_f64(),
    };
    info!(
        "verdict: success={} terminal={:.3e} box={:?} clearance={:?}",
        verdict.success, verdict.terminal_error, verdict.box_excess, verdict.obstacle_clearance
    );
    Ok(SolveReport {
        action: last.action,
        defect: last.defect,
        max_violation: last.violation,
        solution,
        dense,
        closed_loop,
        verdict,
        error_bound,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lagrangian::{BoxBounds, PenaltyGains};
    use crate::pseudospectral::SpectralGrid;
    use std::sync::Arc;

    fn cubic_trajectory(p: usize) -> Trajectory {
        let grid = Arc::new(SpectralGrid::new(p, 1.0).unwrap());
        let values = DMatrix::from_fn(grid.len(), 2, |j, c| {
            let t = grid.nodes()[j];
            if c == 0 { 3.0 * t * t - 2.0 * t.powi(3) } else { 6.0 * t - 6.0 * t * t }
        });
        Trajectory::new(grid, values).unwrap()
    }

    fn constants(c1: f64, c2: f64, c3: f64, y1: f64, y2: f64) -> ErrorBoundConstants {
        ErrorBoundConstants { c1, c2, c3, y1, y2, provenance: Provenance::UserSupplied }
    }

    #[test]
    fn bound_arithmetic() {
        let c = constants(1.0, 1.0, 0.0, 0.0, 0.0);
        assert!((theorem5_bound(&c, 1.0, 3.0) - 1.0).abs() < 1e-15);
        let c = constants(2.3, 0.7, 1.1, 0.4, 0.2);
        let ratio = theorem5_bound(&c, 1.3, 4.0 * 17.0) / theorem5_bound(&c, 1.3, 17.0);
        assert!((ratio - 0.5).abs() < 1e-14);
    }

    #[test]
    fn cubic_control_is_linear() {
        let di = RobotModel::double_integrator(1).unwrap();
        let dense = extract_control_trajectory(&di, &cubic_trajectory(8), 1e-3).unwrap();
        assert_eq!(dense.t.len(), 1001);
        for (t, u) in dense.t.iter().zip(&dense.u) {
            assert!((u[0] - (6.0 - 12.0 * t)).abs() < 1e-3);
        }
        assert_eq!(sample_times(1.0, 0.3).len(), 4);
    }

    #[test]
    fn hanging_rest_needs_no_control() {
        let model = RobotModel::planar_chain(vec![1.0, 1.0], vec![1.0, 1.0], 9.81).unwrap();
        let grid = Arc::new(SpectralGrid::new(6, 2.0).unwrap());
        let traj = Trajectory::new(grid, DMatrix::zeros(7, 4)).unwrap();
        let dense = extract_control_trajectory(&model, &traj, 0.01).unwrap();
        assert!(dense.u.iter().all(|u| u.amax() < 1e-12));
    }

    #[test]
    fn exact_reference_is_tracked() {
        let di = RobotModel::double_integrator(1).unwrap();
        let dense = extract_control_trajectory(&di, &cubic_trajectory(8), 1e-3).unwrap();
        let config = EvaluationConfig::default();
        let run = closed_loop_integrate(&di, &dense, &config).unwrap();
        for (t, x) in run.t.iter().zip(&run.x) {
            let q = 3.0 * t * t - 2.0 * t.powi(3);
            assert!((x[0] - q).abs() < 1e-6, "t = {t}: {}", x[0] - q);
        }
        let verdict = evaluate_success(&di, &run, &[], &DVector::from_vec(vec![1.0, 0.0]), &config);
        assert!(verdict.success);
    }

    #[test]
    fn equilibrium_stays_put() {
        let model = RobotModel::planar_chain(vec![1.0], vec![1.0], 9.81).unwrap();
        let t: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
        let dense = DenseSolution::new(t.clone(), vec![DVector::zeros(2); t.len()], vec![DVector::zeros(1); t.len()]).unwrap();
        let run = closed_loop_integrate(&model, &dense, &EvaluationConfig::default()).unwrap();
        assert!(run.x.iter().all(|x| x.amax() == 0.0));
    }

    fn single_sample_run(x: Vec<f64>, u: Vec<f64>) -> ClosedLoop {
        ClosedLoop { t: vec![0.0], x: vec![DVector::from_vec(x)], u: vec![DVector::from_vec(u)] }
    }

    #[test]
    fn inflated_input_bound() {
        let di = RobotModel::double_integrator(1).unwrap();
        let cons = [ConstraintSpec::new(
            ConstraintKind::InputBox(BoxBounds::new(vec![-5.0], vec![5.0])),
            PenaltyGains::new(1.0, 1.0),
        )];
        let cfg = EvaluationConfig::default();
        let xf = DVector::zeros(2);
        assert!(evaluate_success(&di, &single_sample_run(vec![0.0, 0.0], vec![5.2]), &cons, &xf, &cfg).constraints_ok);
        assert!(evaluate_success(&di, &single_sample_run(vec![0.0, 0.0], vec![-5.25]), &cons, &xf, &cfg).constraints_ok);
        assert!(!evaluate_success(&di, &single_sample_run(vec![0.0, 0.0], vec![5.3]), &cons, &xf, &cfg).constraints_ok);
    }

    #[test]
    fn terminal_threshold() {
        let di = RobotModel::double_integrator(1).unwrap();
        let cfg = EvaluationConfig::default();
        let xf = DVector::zeros(2);
        assert!(evaluate_success(&di, &single_sample_run(vec![0.049, 0.0], vec![0.0]), &[], &xf, &cfg).terminal_ok);
        assert!(!evaluate_success(&di, &single_sample_run(vec![0.051, 0.0], vec![0.0]), &[], &xf, &cfg).terminal_ok);
    }

    #[test]
    fn obstacle_boundary_is_a_failure() {
        let model = RobotModel::planar_chain(vec![1.0], vec![1.0], 9.81).unwrap();
        // Tip hangs at (0, -1); the disc touches it exactly.
        let cons = [ConstraintSpec::new(
            ConstraintKind::CircleObstacle { center: [0.0, -1.5], radius: 0.5, clearance: 0.0, frames: vec![0] },
            PenaltyGains::new(1.0, 1.0),
        )];
        let cfg = EvaluationConfig::default();
        let v = evaluate_success(&model, &single_sample_run(vec![0.0, 0.0], vec![0.0]), &cons, &DVector::zeros(2), &cfg);
        assert!(!v.obstacles_ok);
        assert!(!v.success);
    }

    #[test]
    fn double_integrator_constants() {
        let di = RobotModel::double_integrator(1).unwrap();
        let traj = cubic_trajectory(8);
        let c = estimate_constants(&di, &traj, 12.0, &EstimateOptions::default()).unwrap();
        assert!((c.y1 - 1.0).abs() < 1e-6);
        assert!(c.y2.abs() < 1e-9);
        assert!((c.c2 - 1.0).abs() < 1e-12);
        assert!((c.c1 - 13.2).abs() < 1e-12);
        assert!((c.c3 - 12.0).abs() < 1e-9);
        assert_eq!(c.provenance, Provenance::SampledEstimate);
    }

    #[test]
    fn larger_boxes_never_shrink_estimates() {
        let model = RobotModel::planar_chain(vec![1.0, 0.5], vec![1.0, 0.8], 9.81).unwrap();
        let grid = Arc::new(SpectralGrid::new(6, 1.0).unwrap());
        let traj = Trajectory::straight_line(grid, &DVector::zeros(4), &DVector::from_vec(vec![1.0, -0.5, 0.0, 0.0])).unwrap();
        let mut prev = (0.0, 0.0);
        for scale in [0.5, 1.0, 2.0, 4.0] {
            let c = estimate_constants(&model, &traj, 1.0, &EstimateOptions { box_scale: scale, ..Default::default() }).unwrap();
            assert!(c.y1 >= prev.0 && c.y2 >= prev.1);
            assert!(c.c1 >= 0.0 && c.c2 >= 0.0 && c.c3 >= 0.0);
            prev = (c.y1, c.y2);
        }
    }
}
