//! Method-of-lines heat flow: the spectral right-hand side, the action
//! functional, integration in the flow parameter `s`, and the two-phase
//! schedule that first restores feasibility and then optimizes.

use std::sync::Arc;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::RobotModel;
use crate::error::{AghfError, Result};
use crate::lagrangian::{el_gradients, lagrangian_value, legacy_metric, max_constraint_value, LagrangianMode, LagrangianSpec};
use crate::ode::{self, Control, Failure, Method, StepControl};
use crate::pseudospectral::SpectralGrid;

/// Node values of the homotopy at one value of `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: Arc<SpectralGrid>,
    /// `(p+1) × 2N`, one row per node, positions first.
    values: DMatrix<f64>,
    x0: DVector<f64>,
    xf: DVector<f64>,
}

impl Trajectory {
    /// Wraps node values; the boundary states are taken from the first and last rows.
    pub fn new(grid: Arc<SpectralGrid>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != grid.len() {
            return Err(AghfError::domain(format!(
                "trajectory has {} rows, grid has {} nodes",
                values.nrows(),
                grid.len()
            )));
        }
        if values.ncols() == 0 || !values.ncols().is_multiple_of(2) {
            return Err(AghfError::domain("trajectory needs an even, nonzero number of state columns"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AghfError::NonFinite("trajectory values".into()));
        }
        let x0 = values.row(0).transpose();
        let xf = values.row(grid.len() - 1).transpose();
        Ok(Self { grid, values, x0, xf })
    }

    /// Every state component interpolated linearly in time from `x0` to `xf`.
    pub fn linear(grid: Arc<SpectralGrid>, x0: &DVector<f64>, xf: &DVector<f64>) -> Result<Self> {
        check_boundary(x0, xf)?;
        let t_end = grid.horizon();
        let values = DMatrix::from_fn(grid.len(), x0.len(), |j, i| {
            let a = grid.nodes()[j] / t_end;
            (1.0 - a) * x0[i] + a * xf[i]
        });
        Self::new(grid, values)
    }

    /// Cubic Hermite positions matching the boundary positions and velocities
    /// (a straight configuration-space path when both velocities vanish), with
    /// velocities taken from the differentiation matrix.
    pub fn straight_line(grid: Arc<SpectralGrid>, x0: &DVector<f64>, xf: &DVector<f64>) -> Result<Self> {
        check_boundary(x0, xf)?;
        let n = x0.len() / 2;
        let t_end = grid.horizon();
        let positions = DMatrix::from_fn(grid.len(), n, |j, i| {
            let a = grid.nodes()[j] / t_end;
            let h00 = 2.0 * a.powi(3) - 3.0 * a * a + 1.0;
            let h10 = a.powi(3) - 2.0 * a * a + a;
            let h01 = 3.0 * a * a - 2.0 * a.powi(3);
            let h11 = a.powi(3) - a * a;
            h00 * x0[i] + h10 * t_end * x0[n + i] + h01 * xf[i] + h11 * t_end * xf[n + i]
        });
        Self::from_positions(grid, positions, x0, xf)
    }

    /// Builds a trajectory from sampled positions; velocities come from the
    /// differentiation matrix and the boundary rows are pinned to `x0`, `xf`.
    pub fn from_positions(grid: Arc<SpectralGrid>, positions: DMatrix<f64>, x0: &DVector<f64>, xf: &DVector<f64>) -> Result<Self> {
        let n = positions.ncols();
        if x0.len() != 2 * n || xf.len() != 2 * n {
            return Err(AghfError::domain(format!("boundary states must have length {}", 2 * n)));
        }
        let velocities = grid.differentiate(&positions)?;
        let p = grid.degree();
        let mut values = DMatrix::zeros(grid.len(), 2 * n);
        values.columns_mut(0, n).copy_from(&positions);
        values.columns_mut(n, n).copy_from(&velocities);
        values.set_row(0, &x0.transpose());
        values.set_row(p, &xf.transpose());
        Self::new(grid, values)
    }

    /// Re-samples onto another grid by interpolation, keeping the boundary states.
    pub fn resample(&self, grid: Arc<SpectralGrid>) -> Result<Self> {
        if grid.len() == self.grid.len() && grid.horizon() == self.grid.horizon() {
            return Ok(Self { grid, ..self.clone() });
        }
        if (grid.horizon() - self.grid.horizon()).abs() > 1e-12 * grid.horizon() {
            return Err(AghfError::domain("cannot resample onto a grid with a different horizon"));
        }
        let mut values = DMatrix::zeros(grid.len(), self.values.ncols());
        for (j, &t) in grid.nodes().iter().enumerate() {
            values.set_row(j, &self.grid.interpolate(&self.values, t)?.transpose());
        }
        let p = grid.degree();
        values.set_row(0, &self.x0.transpose());
        values.set_row(p, &self.xf.transpose());
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn xf(&self) -> &DVector<f64> {
        &self.xf
    }

    pub fn dof(&self) -> usize {
        self.values.ncols() / 2
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    /// `D · values`, the spectral time derivative at the nodes.
    pub fn derivative(&self) -> DMatrix<f64> {
        self.grid.diff_matrix() * &self.values
    }

    pub fn state_at(&self, t: f64) -> Result<DVector<f64>> {
        self.grid.interpolate(&self.values, t)
    }

    /// `max_j ‖ẋ_P1 − x_P2‖∞` over all nodes.
    pub fn feasibility_defect(&self) -> f64 {
        let (n, xd) = (self.dof(), self.derivative());
        let mut worst: f64 = 0.0;
        for j in 0..self.grid.len() {
            for i in 0..n {
                worst = worst.max((xd[(j, i)] - self.values[(j, n + i)]).abs());
            }
        }
        worst
    }

    /// `∫ ‖ẋ_P1 − x_P2‖² dt` by quadrature.
    pub fn defect_l2_squared(&self) -> f64 {
        let (n, xd) = (self.dof(), self.derivative());
        let integrand: Vec<f64> = (0..self.grid.len())
            .map(|j| (0..n).map(|i| (xd[(j, i)] - self.values[(j, n + i)]).powi(2)).sum())
            .collect();
        self.grid.quadrature(&integrand).expect("one sample per node")
    }

    fn interior_vector(&self) -> DVector<f64> {
        let p = self.grid.degree();
        let d = self.values.ncols();
        let mut y = DVector::zeros((p - 1) * d);
        for j in 1..p {
            for c in 0..d {
                y[(j - 1) * d + c] = self.values[(j, c)];
            }
        }
        y
    }

    fn with_interior(&self, y: &DVector<f64>) -> Self {
        let p = self.grid.degree();
        let d = self.values.ncols();
        let mut values = self.values.clone();
        for j in 1..p {
            for c in 0..d {
                values[(j, c)] = y[(j - 1) * d + c];
            }
        }
        Self {
            grid: self.grid.clone(),
            values,
            x0: self.x0.clone(),
            xf: self.xf.clone(),
        }
    }
}

fn check_boundary(x0: &DVector<f64>, xf: &DVector<f64>) -> Result<()> {
    if x0.len() != xf.len() || !x0.len().is_multiple_of(2) || x0.is_empty() {
        return Err(AghfError::domain("boundary states must have equal, even length"));
    }
    if x0.iter().chain(xf.iter()).any(|v| !v.is_finite()) {
        return Err(AghfError::NonFinite("boundary states".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub s_max: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    pub initial_step: f64,
    /// Early exit once the interior RHS infinity norm drops to this value.
    pub steady_state_tol: f64,
    pub parallel_nodes: bool,
    pub integrator: Method,
    /// Treat reaching `s_max` without steady state as a failure.
    pub require_steady_state: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            s_max: 10.0,
            rel_tol: 1e-6,
            abs_tol: 1e-8,
            max_steps: 20_000,
            initial_step: 1e-6,
            steady_state_tol: 1e-6,
            parallel_nodes: false,
            integrator: Method::Rosenbrock23,
            require_steady_state: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("s_max", self.s_max),
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("initial_step", self.initial_step),
            ("steady_state_tol", self.steady_state_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(AghfError::domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.max_steps == 0 {
            return Err(AghfError::domain("max_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub s: f64,
    pub action: f64,
    pub rhs_norm: f64,
    /// `max(0, max g)` over nodes and constraints.
    pub violation: f64,
    pub defect: f64,
    /// `∫ ‖ẋ_P1 − x_P2‖² dt`.
    pub defect_l2_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowTrace {
    pub samples: Vec<FlowSample>,
    pub accepted: usize,
    pub rejected: usize,
    /// Steps the integrator accepted but the flow vetoed because the action rose.
    pub action_rejections: usize,
    pub wall_time: f64,
    pub steady_state: bool,
}

impl FlowTrace {
    pub fn last(&self) -> Option<&FlowSample> {
        self.samples.last()
    }

    /// Index `k` of the first sample pair with
    /// `A[k+1] > A[k] (1 + ACTION_SLACK_REL) + ACTION_SLACK_ABS`.
    pub fn first_action_increase(&self) -> Option<usize> {
        self.samples
            .windows(2)
            .position(|w| w[1].action > w[0].action * (1.0 + ACTION_SLACK_REL) + ACTION_SLACK_ABS)
    }

    pub fn is_action_monotone(&self) -> bool {
        self.first_action_increase().is_none()
    }
}

struct NodeGradients {
    dx: DMatrix<f64>,
    dxdot: DMatrix<f64>,
}

fn node_gradients(spec: &LagrangianSpec, model: &RobotModel, traj: &Trajectory, xdot: &DMatrix<f64>, parallel: bool) -> Result<NodeGradients> {
    let rows = traj.grid.len();
    let d = traj.values.ncols();
    let eval = |j: usize| {
        let x = traj.values.row(j).transpose();
        let xd = xdot.row(j).transpose();
        el_gradients(spec, model, &x, &xd)
    };
    let per_node: Vec<_> = if parallel {
        (0..rows).into_par_iter().map(eval).collect::<Result<_>>()?
    } else {
        (0..rows).map(eval).collect::<Result<_>>()?
    };
    let mut dx = DMatrix::zeros(rows, d);
    let mut dxdot = DMatrix::zeros(rows, d);
    for (j, g) in per_node.into_iter().enumerate() {
        dx.set_row(j, &g.dx.transpose());
        dxdot.set_row(j, &g.dxdot.transpose());
    }
    Ok(NodeGradients { dx, dxdot })
}

/// `M⁻¹ (d/dt ∂L/∂ẋ − ∂L/∂x)` at interior nodes; boundary rows are zero.
pub fn aghf_rhs(spec: &LagrangianSpec, model: &RobotModel, traj: &Trajectory) -> Result<DMatrix<f64>> {
    rhs_impl(spec, model, traj, false)
}

fn rhs_impl(spec: &LagrangianSpec, model: &RobotModel, traj: &Trajectory, parallel: bool) -> Result<DMatrix<f64>> {
    if traj.dof() != model.dof() {
        return Err(AghfError::domain(format!(
            "trajectory has {} degrees of freedom, model has {}",
            traj.dof(),
            model.dof()
        )));
    }
    let xdot = traj.derivative();
    let g = node_gradients(spec, model, traj, &xdot, parallel)?;
    // Euler–Lagrange residual with d/dt realized as the quadrature adjoint of D,
    // -W⁻¹ Dᵀ W, so the interior rows are exactly -W⁻¹ ∇A of the discrete action.
    let w = traj.grid.quad_weights();
    let mut weighted = g.dxdot;
    for (j, mut row) in weighted.row_iter_mut().enumerate() {
        row *= w[j];
    }
    let mut rhs = -(traj.grid.diff_matrix().tr_mul(&weighted));
    for (j, mut row) in rhs.row_iter_mut().enumerate() {
        row /= w[j];
    }
    rhs -= &g.dx;
    let p = traj.grid.degree();
    if spec.mode == LagrangianMode::Legacy {
        let n = model.dof();
        for j in 1..p {
            let q = traj.values.row(j).columns(0, n).transpose();
            let metric = legacy_metric(model, &q, spec.kd);
            let row = rhs.row(j).transpose();
            let solved = metric
                .cholesky()
                .ok_or_else(|| AghfError::NonFinite("legacy metric is not positive definite".into()))?
                .solve(&row);
            rhs.set_row(j, &solved.transpose());
        }
    }
    rhs.row_mut(0).fill(0.0);
    rhs.row_mut(p).fill(0.0);
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(AghfError::NonFinite("AGHF right-hand side".into()));
    }
    Ok(rhs)
}

/// Quadrature of the Lagrangian over the nodes.
pub fn action_functional(spec: &LagrangianSpec, model: &RobotModel, traj: &Trajectory) -> Result<f64> {
    let xdot = traj.derivative();
    let integrand = (0..traj.grid.len())
        .map(|j| lagrangian_value(spec, model, &traj.values.row(j).transpose(), &xdot.row(j).transpose()))
        .collect::<Result<Vec<_>>>()?;
    traj.grid.quadrature(&integrand)
}

/// `max(0, max_{j,k} g_k(t_j))`.
pub fn max_violation(spec: &LagrangianSpec, model: &RobotModel, traj: &Trajectory) -> Result<f64> {
    let xdot = traj.derivative();
    let mut worst: f64 = 0.0;
    for j in 0..traj.grid.len() {
        if let Some(g) = max_constraint_value(spec, model, &traj.values.row(j).transpose(), &xdot.row(j).transpose())? {
            worst = worst.max(g);
        }
    }
    Ok(worst)
}

fn interior_norm(rhs: &DVector<f64>) -> f64 {
    rhs.amax()
}

fn sample(spec: &LagrangianSpec, model: &RobotModel, traj: &Trajectory, s: f64, rhs_norm: f64) -> Result<FlowSample> {
    Ok(FlowSample {
        s,
        action: action_functional(spec, model, traj)?,
        rhs_norm,
        violation: max_violation(spec, model, traj)?,
        defect: traj.feasibility_defect(),
        defect_l2_squared: traj.defect_l2_squared(),
    })
}

/// Per-step slack allowed on the action before a step is vetoed.
pub const ACTION_SLACK_REL: f64 = 1e-8;
pub const ACTION_SLACK_ABS: f64 = 1e-10;

/// Integrates the heat flow from `s = 0` to `config.s_max`, stopping early at
/// steady state.
pub fn flow(spec: &LagrangianSpec, model: &RobotModel, initial: &Trajectory, config: &SolverConfig) -> Result<(Trajectory, FlowTrace)> {
    config.validate()?;
    spec.validate(model)?;
    if initial.grid.degree() < 2 {
        return Err(AghfError::domain("the flow needs at least one interior node (p >= 2)"));
    }
    let start = Instant::now();
    let parallel = config.parallel_nodes;
    let rhs_interior = |traj: &Trajectory| -> Result<DVector<f64>> {
        Ok(Trajectory {
            values: rhs_impl(spec, model, traj, parallel)?,
            ..traj.clone()
        }
        .interior_vector())
    };

    let y0 = initial.interior_vector();
    let f0 = rhs_interior(initial)?;
    let mut trace = FlowTrace {
        samples: vec![sample(spec, model, initial, 0.0, interior_norm(&f0))?],
        ..Default::default()
    };
    if trace.samples[0].rhs_norm <= config.steady_state_tol {
        trace.steady_state = true;
        trace.wall_time = start.elapsed().as_secs_f64();
        return Ok((initial.clone(), trace));
    }

    let control = StepControl {
        rel_tol: config.rel_tol,
        abs_tol: config.abs_tol,
        initial_step: config.initial_step,
        max_steps: config.max_steps,
        ..Default::default()
    };
    let mut steady = false;
    let outcome = ode::integrate(
        config.integrator,
        |_s, y| rhs_interior(&initial.with_interior(y)),
        0.0,
        y0,
        config.s_max,
        &control,
        |s, y, fy| {
            let traj = initial.with_interior(y);
            let point = sample(spec, model, &traj, s, interior_norm(fy))?;
            debug!("s = {s:.6e} action = {:.10e} rhs = {:.3e}", point.action, point.rhs_norm);
            let prev = trace.samples.last().expect("initial sample").action;
            if point.action > prev * (1.0 + ACTION_SLACK_REL) + ACTION_SLACK_ABS {
                trace.action_rejections += 1;
                return Ok(Control::Reject);
            }
            trace.samples.push(point);
            if point.rhs_norm <= config.steady_state_tol {
                steady = true;
                return Ok(Control::Halt);
            }
            Ok(Control::Continue)
        },
    )?;
    trace.accepted = outcome.accepted;
    trace.rejected = outcome.rejected;
    trace.steady_state = steady;
    trace.wall_time = start.elapsed().as_secs_f64();
    let last = initial.with_interior(&outcome.y);
    match outcome.failure {
        Some(Failure::StepUnderflow { step }) => Err(AghfError::StepUnderflow {
            s: outcome.t,
            step,
            last: Box::new(last),
        }),
        Some(Failure::MaxSteps) => Err(AghfError::MaxSteps {
            steps: config.max_steps,
            s: outcome.t,
            last: Box::new(last),
        }),
        None => {
            info!(
                "flow finished at s = {:.4e} after {} steps ({} rejected){}",
                outcome.t,
                outcome.accepted,
                outcome.rejected,
                if steady { ", steady state" } else { "" }
            );
            Ok((last, trace))
        }
    }
}

/// Lagrangian, grid degree and solver settings for one phase.
#[derive(Debug, Clone)]
pub struct PhaseSetup {
    pub spec: LagrangianSpec,
    pub degree: usize,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub model: RobotModel,
    pub x0: DVector<f64>,
    pub xf: DVector<f64>,
    pub horizon: f64,
    pub phase1: PhaseSetup,
    pub phase2: PhaseSetup,
    /// Phase 1 is skipped when the guess already satisfies `max g <= feasibility_tol`.
    pub feasibility_tol: f64,
    /// Defaults to [`Trajectory::straight_line`] on the Phase-1 grid.
    pub initial_guess: Option<Trajectory>,
}

pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct PhaseRun {
    pub trace: FlowTrace,
    pub output: Trajectory,
}

#[derive(Debug, Clone)]
pub struct PhaseSolution {
    pub trajectory: Trajectory,
    pub initial_violation: f64,
    pub phase1_skipped: bool,
    pub phase1: Option<PhaseRun>,
    /// Max constraint value of the Phase-1 output (or of the guess when skipped).
    pub phase1_violation: f64,
    pub phase2: PhaseRun,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        let d = self.model.state_dim();
        if self.x0.len() != d || self.xf.len() != d {
            return Err(AghfError::domain(format!("boundary states must have length {d}")));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(AghfError::domain("horizon must be positive"));
        }
        if !(self.feasibility_tol >= 0.0) {
            return Err(AghfError::domain("feasibility tolerance must be nonnegative"));
        }
        for phase in [&self.phase1, &self.phase2] {
            phase.spec.validate(&self.model)?;
            phase.solver.validate()?;
            if phase.degree < 2 {
                return Err(AghfError::domain("grid degree must be at least 2"));
            }
        }
        if let Some(guess) = &self.initial_guess {
            if guess.x0() != &self.x0 || guess.xf() != &self.xf {
                return Err(AghfError::domain("initial guess does not match the boundary states"));
            }
        }
        Ok(())
    }
}

/// Phase 1 (feasibility) followed by Phase 2 (optimization).
pub fn solve_phase1_phase2(problem: &Problem) -> Result<PhaseSolution> {
    problem.validate()?;
    let model = &problem.model;
    let grid1 = Arc::new(SpectralGrid::new(problem.phase1.degree, problem.horizon)?);
    let guess = match &problem.initial_guess {
        Some(g) => g.resample(grid1.clone())?,
        None => Trajectory::straight_line(grid1, &problem.x0, &problem.xf)?,
    };
    let initial_violation = max_violation(&problem.phase1.spec, model, &guess)?;
    info!("initial guess max constraint value {initial_violation:.3e}");

    let (phase1, phase1_out) = if initial_violation <= problem.feasibility_tol {
        info!("guess is feasible, skipping phase 1");
        (None, guess)
    } else {
        let (out, trace) = flow(&problem.phase1.spec, model, &guess, &problem.phase1.solver)?;
        (Some(PhaseRun { trace, output: out.clone() }), out)
    };
    let phase1_violation = max_violation(&problem.phase1.spec, model, &phase1_out)?;
    if phase1.is_some() && phase1_violation > problem.feasibility_tol {
        return Err(AghfError::Phase1Failed {
            violation: phase1_violation,
            tolerance: problem.feasibility_tol,
            last: Box::new(phase1_out),
        });
    }

    let grid2 = Arc::new(SpectralGrid::new(problem.phase2.degree, problem.horizon)?);
    let start2 = phase1_out.resample(grid2)?;
    let (out, trace) = flow(&problem.phase2.spec, model, &start2, &problem.phase2.solver)?;
    if !trace.steady_state {
        let rhs_norm = trace.last().map_or(f64::NAN, |s| s.rhs_norm);
        if problem.phase2.solver.require_steady_state {
            return Err(AghfError::Phase2Stalled {
                rhs_norm,
                last: Box::new(out),
            });
        }
        warn!("phase 2 reached s_max without steady state (rhs norm {rhs_norm:.3e})");
    }
    Ok(PhaseSolution {
        trajectory: out.clone(),
        initial_violation,
        phase1_skipped: phase1.is_none(),
        phase1,
        phase1_violation,
        phase2: PhaseRun { trace, output: out },
    })
}
