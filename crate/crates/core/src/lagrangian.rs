//! Lagrangians for the heat flow: the generalized running-cost Lagrangian, its
//! penalty-constrained extension, the feasibility-only Lagrangian used to
//! restore constraint satisfaction, and the classical control-effort form.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{RobotModel, StatePoint};
use crate::error::{AghfError, Result};

/// Smooth switch `S(g) = 1/2 + 1/2 tanh(c g)`.
pub fn activation(g: f64, sharpness: f64) -> f64 {
    0.5 + 0.5 * (sharpness * g).tanh()
}

pub fn activation_derivative(g: f64, sharpness: f64) -> f64 {
    let t = (sharpness * g).tanh();
    0.5 * sharpness * (1.0 - t * t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyGains {
    /// Penalty weight `k_cons`.
    pub weight: f64,
    /// Activation sharpness `c_cons`.
    pub sharpness: f64,
}

impl PenaltyGains {
    pub fn new(weight: f64, sharpness: f64) -> Self {
        Self { weight, sharpness }
    }

    /// `b(g) = k g² S(g)`.
    pub fn value(&self, g: f64) -> f64 {
        self.weight * g * g * activation(g, self.sharpness)
    }

    /// `db/dg`.
    pub fn derivative(&self, g: f64) -> f64 {
        self.weight
            * (2.0 * g * activation(g, self.sharpness) + g * g * activation_derivative(g, self.sharpness))
    }
}

/// Penalty `b(g)` for one constraint value.
pub fn penalty(g: f64, spec: &ConstraintSpec) -> f64 {
    spec.gains.value(g)
}

/// Per-component bounds; infinite entries are unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// The penalty acts on the box shrunk by this amount on each side; the
    /// nominal bounds are what success checks use.
    #[serde(default)]
    pub clearance: f64,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper, clearance: 0.0 }
    }

    pub fn symmetric(limit: f64, len: usize) -> Self {
        Self::new(vec![-limit; len], vec![limit; len])
    }

    pub fn with_clearance(mut self, clearance: f64) -> Self {
        self.clearance = clearance;
        self
    }

    fn validate(&self, len: usize, what: &str) -> Result<()> {
        if self.lower.len() != len || self.upper.len() != len {
            return Err(AghfError::domain(format!("{what} bounds must have length {len}")));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l.is_nan() || u.is_nan() || l > u) {
            return Err(AghfError::domain(format!("{what} lower bound exceeds upper bound")));
        }
        if !(self.clearance >= 0.0) || !self.clearance.is_finite() {
            return Err(AghfError::domain(format!("{what} clearance must be nonnegative")));
        }
        Ok(())
    }

    fn terms(&self, values: &[f64], offset: usize, out: &mut Vec<Term>) {
        for (i, &v) in values.iter().enumerate() {
            if self.upper[i].is_finite() {
                out.push(Term {
                    g: v - (self.upper[i] - self.clearance),
                    grad: vec![(offset + i, 1.0)],
                });
            }
            if self.lower[i].is_finite() {
                out.push(Term {
                    g: (self.lower[i] + self.clearance) - v,
                    grad: vec![(offset + i, -1.0)],
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintKind {
    StateBox(BoxBounds),
    VelocityBox(BoxBounds),
    InputBox(BoxBounds),
    /// Keep the listed frames outside a disc of radius `radius + clearance`.
    CircleObstacle {
        center: [f64; 2],
        radius: f64,
        clearance: f64,
        frames: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    pub gains: PenaltyGains,
}

/// One scalar inequality `g <= 0` with its gradients.
#[derive(Debug, Clone)]
struct Term {
    g: f64,
    /// Nonzero entries of `∂g/∂x` (state constraints) or `∂g/∂u` (input constraints).
    grad: Vec<(usize, f64)>,
}

impl ConstraintSpec {
    pub fn new(kind: ConstraintKind, gains: PenaltyGains) -> Self {
        Self { kind, gains }
    }

    pub fn is_input_constraint(&self) -> bool {
        matches!(self.kind, ConstraintKind::InputBox(_))
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        if !(self.gains.weight > 0.0) || !(self.gains.sharpness > 0.0) {
            return Err(AghfError::domain("penalty weight and sharpness must be positive"));
        }
        match &self.kind {
            ConstraintKind::StateBox(b) => b.validate(model.dof(), "state_box"),
            ConstraintKind::VelocityBox(b) => b.validate(model.dof(), "velocity_box"),
            ConstraintKind::InputBox(b) => b.validate(model.num_inputs(), "input_box"),
            ConstraintKind::CircleObstacle {
                center,
                radius,
                clearance,
                frames,
            } => {
                if !(radius > &0.0) || !(clearance >= &0.0) || center.iter().any(|c| !c.is_finite()) {
                    return Err(AghfError::domain("obstacle radius must be positive and clearance nonnegative"));
                }
                if frames.iter().any(|&f| f >= model.dof()) {
                    return Err(AghfError::domain(format!(
                        "obstacle frame index out of range (model has {} frames)",
                        model.dof()
                    )));
                }
                Ok(())
            }
        }
    }

    fn terms(&self, model: &RobotModel, x: &StatePoint, u: Option<&DVector<f64>>, out: &mut Vec<Term>) {
        let n = model.dof();
        match &self.kind {
            ConstraintKind::StateBox(b) => b.terms(x.position.as_slice(), 0, out),
            ConstraintKind::VelocityBox(b) => b.terms(x.velocity.as_slice(), n, out),
            ConstraintKind::InputBox(b) => {
                if let Some(u) = u {
                    b.terms(u.as_slice(), 0, out)
                }
            }
            ConstraintKind::CircleObstacle {
                center,
                radius,
                clearance,
                frames,
            } => {
                let c = Vector2::new(center[0], center[1]);
                let r = radius + clearance;
                let points = model.forward_kinematics(&x.position);
                for &f in frames {
                    let d = points[f] - c;
                    let jac = model.frame_jacobian(&x.position, f);
                    // g = r² - |p - c|², ∂g/∂q = -2 dᵀ J
                    let grad = (0..n)
                        .map(|k| (k, -2.0 * (d.x * jac[(0, k)] + d.y * jac[(1, k)])))
                        .collect();
                    out.push(Term {
                        g: r * r - d.norm_squared(),
                        grad,
                    });
                }
            }
        }
    }

    /// Constraint values `g` (feasible when `<= 0`). Input constraints need `u`.
    pub fn values(&self, model: &RobotModel, x: &StatePoint, u: Option<&DVector<f64>>) -> Vec<f64> {
        let mut terms = Vec::new();
        self.terms(model, x, u, &mut terms);
        terms.into_iter().map(|t| t.g).collect()
    }
}

/// Gradient of a running cost with respect to its three arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct CostGradient {
    pub dx: DVector<f64>,
    pub dxdot: DVector<f64>,
    pub du: DVector<f64>,
}

/// A user-supplied running cost `c(x, ẋ, u)`.
pub trait RunningCost: Send + Sync + fmt::Debug {
    fn value(&self, x: &DVector<f64>, xdot: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>, xdot: &DVector<f64>, u: &DVector<f64>) -> CostGradient;
}

/// `(x - r)ᵀ diag(w) (x - r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticStateCost {
    pub weights: Vec<f64>,
    pub reference: Vec<f64>,
}

impl RunningCost for QuadraticStateCost {
    fn value(&self, x: &DVector<f64>, _xdot: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        x.iter()
            .zip(&self.reference)
            .zip(&self.weights)
            .map(|((xi, ri), wi)| wi * (xi - ri).powi(2))
            .sum()
    }

    fn gradient(&self, x: &DVector<f64>, xdot: &DVector<f64>, u: &DVector<f64>) -> CostGradient {
        CostGradient {
            dx: DVector::from_iterator(
                x.len(),
                x.iter()
                    .zip(&self.reference)
                    .zip(&self.weights)
                    .map(|((xi, ri), wi)| 2.0 * wi * (xi - ri)),
            ),
            dxdot: DVector::zeros(xdot.len()),
            du: DVector::zeros(u.len()),
        }
    }
}

#[derive(Debug, Clone)]
pub enum CostSpec {
    /// `‖u‖²`
    SquaredControl,
    /// `Σ w_i u_i²`
    WeightedSquaredControl(Vec<f64>),
    /// Any running cost in `(x, ẋ, u)`.
    Custom(Arc<dyn RunningCost>),
}

impl CostSpec {
    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        if let CostSpec::WeightedSquaredControl(w) = self {
            if w.len() != model.num_inputs() {
                return Err(AghfError::domain(format!(
                    "control weights must have length {}",
                    model.num_inputs()
                )));
            }
            if w.iter().any(|&v| !(v > 0.0)) {
                return Err(AghfError::domain("control weights must be strictly positive"));
            }
        }
        Ok(())
    }

    fn value(&self, x: &DVector<f64>, xdot: &DVector<f64>, u: &DVector<f64>) -> f64 {
        match self {
            CostSpec::SquaredControl => u.norm_squared(),
            CostSpec::WeightedSquaredControl(w) => u.iter().zip(w).map(|(ui, wi)| wi * ui * ui).sum(),
            CostSpec::Custom(c) => c.value(x, xdot, u),
        }
    }

    fn gradient(&self, x: &DVector<f64>, xdot: &DVector<f64>, u: &DVector<f64>) -> CostGradient {
        match self {
            CostSpec::SquaredControl => CostGradient {
                dx: DVector::zeros(x.len()),
                dxdot: DVector::zeros(xdot.len()),
                du: u * 2.0,
            },
            CostSpec::WeightedSquaredControl(w) => CostGradient {
                dx: DVector::zeros(x.len()),
                dxdot: DVector::zeros(xdot.len()),
                du: DVector::from_iterator(u.len(), u.iter().zip(w).map(|(ui, wi)| 2.0 * wi * ui)),
            },
            CostSpec::Custom(c) => c.gradient(x, xdot, u),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagrangianMode {
    /// Dynamics penalty plus constraint penalties, no running cost; `M = I`.
    Phase1,
    /// Dynamics penalty, running cost and constraint penalties; `M = I`.
    Phase2,
    /// `(ẋ - fd)ᵀ G (ẋ - fd)` with `G = diag(kd I, HᵀH)` and `M = G`.
    Legacy,
}

#[derive(Debug, Clone)]
pub struct LagrangianSpec {
    pub cost: CostSpec,
    pub kd: f64,
    pub constraints: Vec<ConstraintSpec>,
    pub mode: LagrangianMode,
}

impl LagrangianSpec {
    pub fn new(cost: CostSpec, kd: f64, constraints: Vec<ConstraintSpec>, mode: LagrangianMode) -> Self {
        Self {
            cost,
            kd,
            constraints,
            mode,
        }
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        if !(self.kd > 0.0) || !self.kd.is_finite() {
            return Err(AghfError::domain("kd must be positive"));
        }
        self.cost.validate(model)?;
        for c in &self.constraints {
            c.validate(model)?;
        }
        Ok(())
    }

    fn has_input_constraints(&self) -> bool {
        self.constraints.iter().any(ConstraintSpec::is_input_constraint)
    }

    fn uses_control(&self) -> bool {
        self.mode != LagrangianMode::Phase1 || self.has_input_constraints()
    }
}

/// `∂L/∂x` and `∂L/∂ẋ` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ElGradients {
    pub dx: DVector<f64>,
    pub dxdot: DVector<f64>,
}

fn check_lengths(model: &RobotModel, x: &DVector<f64>, xdot: &DVector<f64>) -> Result<()> {
    let d = model.state_dim();
    if x.len() != d || xdot.len() != d {
        return Err(AghfError::domain(format!("state vectors must have length {d}")));
    }
    Ok(())
}

/// The control the Lagrangian is built on: extracted control in phase modes,
/// plain inverse dynamics `H ẋ_P2 + C` in legacy mode.
fn lagrangian_control(spec: &LagrangianSpec, model: &RobotModel, x: &StatePoint, xdot: &DVector<f64>) -> Result<DVector<f64>> {
    let n = model.dof();
    if spec.mode == LagrangianMode::Legacy {
        Ok(model.inverse_dynamics(&x.position, &x.velocity, &xdot.rows(n, n).into_owned()))
    } else {
        Ok(model.extract_control(x, xdot)?.u)
    }
}

pub fn lagrangian_value(spec: &LagrangianSpec, model: &RobotModel, x: &DVector<f64>, xdot: &DVector<f64>) -> Result<f64> {
    check_lengths(model, x, xdot)?;
    let n = model.dof();
    let sp = StatePoint::from_state(x.as_slice());

    let mut value = match spec.mode {
        LagrangianMode::Legacy => legacy_quadratic_form(model, spec.kd, &sp, xdot)?,
        _ => {
            let defect = xdot.rows(0, n) - &sp.velocity;
            spec.kd * defect.norm_squared()
        }
    };

    let u = if spec.uses_control() {
        Some(lagrangian_control(spec, model, &sp, xdot)?)
    } else {
        None
    };
    if spec.mode == LagrangianMode::Phase2 {
        value += spec.cost.value(x, xdot, u.as_ref().expect("control computed for phase 2"));
    }
    let mut terms = Vec::new();
    for c in &spec.constraints {
        terms.clear();
        c.terms(model, &sp, u.as_ref(), &mut terms);
        value += terms.iter().map(|t| c.gains.value(t.g)).sum::<f64>();
    }
    Ok(value)
}

/// `(ẋ - fd)ᵀ G (ẋ - fd)` with `G = diag(k I, HᵀH)`.
pub fn legacy_quadratic_form(model: &RobotModel, k: f64, x: &StatePoint, xdot: &DVector<f64>) -> Result<f64> {
    let dec = model.affine_decomposition(x)?;
    let r = xdot - &dec.drift;
    let g = legacy_metric(model, &x.position, k);
    Ok(r.dot(&(g * &r)))
}

/// The metric `G = diag(k I, HᵀH)`.
pub fn legacy_metric(model: &RobotModel, q: &DVector<f64>, k: f64) -> DMatrix<f64> {
    let n = model.dof();
    let h = model.mass_matrix(q);
    let mut g = DMatrix::zeros(2 * n, 2 * n);
    g.view_mut((0, 0), (n, n)).fill_diagonal(k);
    g.view_mut((n, n), (n, n)).copy_from(&(h.transpose() * &h));
    g
}

/// Analytic `∂L/∂x`, `∂L/∂ẋ`. Models without the identity actuation map fall
/// back to central differences.
pub fn el_gradients(spec: &LagrangianSpec, model: &RobotModel, x: &DVector<f64>, xdot: &DVector<f64>) -> Result<ElGradients> {
    check_lengths(model, x, xdot)?;
    if !model.is_fully_actuated() && spec.uses_control() && spec.mode != LagrangianMode::Legacy {
        return el_gradients_fd(spec, model, x, xdot);
    }
    let n = model.dof();
    let d = 2 * n;
    let sp = StatePoint::from_state(x.as_slice());
    let mut dx = DVector::zeros(d);
    let mut dxdot = DVector::zeros(d);

    let defect = xdot.rows(0, n) - &sp.velocity;
    for i in 0..n {
        dxdot[i] += 2.0 * spec.kd * defect[i];
        dx[n + i] -= 2.0 * spec.kd * defect[i];
    }

    let mut terms = Vec::new();
    let mut du = DVector::zeros(model.num_inputs());
    let u = if spec.uses_control() {
        Some(lagrangian_control(spec, model, &sp, xdot)?)
    } else {
        None
    };

    if let Some(u) = &u {
        if spec.mode != LagrangianMode::Phase1 {
            let cg = match spec.mode {
                LagrangianMode::Legacy => CostSpec::SquaredControl.gradient(x, xdot, u),
                _ => spec.cost.gradient(x, xdot, u),
            };
            dx += &cg.dx;
            dxdot += &cg.dxdot;
            du += &cg.du;
        }
    }

    for c in &spec.constraints {
        terms.clear();
        c.terms(model, &sp, u.as_ref(), &mut terms);
        let input = c.is_input_constraint();
        for t in &terms {
            let db = c.gains.derivative(t.g);
            if db == 0.0 {
                continue;
            }
            for &(k, gk) in &t.grad {
                if input {
                    du[k] += db * gk;
                } else {
                    dx[k] += db * gk;
                }
            }
        }
    }

    if u.is_some() && du.iter().any(|&v| v != 0.0) {
        // Chain rule through u(x, ẋ) = H(q) ẋ_P2 + C(q, x_P2).
        let (dq, dqd) = model.inverse_dynamics_derivatives(&sp.position, &sp.velocity, &xdot.rows(n, n).into_owned());
        let h = model.mass_matrix(&sp.position);
        let to_pos = dq.transpose() * &du;
        let to_vel = dqd.transpose() * &du;
        let to_acc = h.transpose() * &du;
        for i in 0..n {
            dx[i] += to_pos[i];
            dx[n + i] += to_vel[i];
            dxdot[n + i] += to_acc[i];
        }
    }
    Ok(ElGradients { dx, dxdot })
}

/// Central differences of [`lagrangian_value`], step `1e-6 (1 + |entry|)`.
pub fn el_gradients_fd(spec: &LagrangianSpec, model: &RobotModel, x: &DVector<f64>, xdot: &DVector<f64>) -> Result<ElGradients> {
    check_lengths(model, x, xdot)?;
    let d = x.len();
    let mut dx = DVector::zeros(d);
    let mut dxdot = DVector::zeros(d);
    for k in 0..d {
        let h = 1e-6 * (1.0 + x[k].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        dx[k] = (lagrangian_value(spec, model, &xp, xdot)? - lagrangian_value(spec, model, &xm, xdot)?) / (2.0 * h);
        let h = 1e-6 * (1.0 + xdot[k].abs());
        let mut vp = xdot.clone();
        let mut vm = xdot.clone();
        vp[k] += h;
        vm[k] -= h;
        dxdot[k] = (lagrangian_value(spec, model, x, &vp)? - lagrangian_value(spec, model, x, &vm)?) / (2.0 * h);
    }
    Ok(ElGradients { dx, dxdot })
}

/// Largest constraint value `g` over all constraints at one point, or `None`
/// when the spec carries no constraints.
pub fn max_constraint_value(spec: &LagrangianSpec, model: &RobotModel, x: &DVector<f64>, xdot: &DVector<f64>) -> Result<Option<f64>> {
    if spec.constraints.is_empty() {
        return Ok(None);
    }
    let sp = StatePoint::from_state(x.as_slice());
    let u = if spec.has_input_constraints() {
        Some(model.extract_control(&sp, xdot)?.u)
    } else {
        None
    };
    let mut terms = Vec::new();
    for c in &spec.constraints {
        c.terms(model, &sp, u.as_ref(), &mut terms);
    }
    Ok(terms.iter().map(|t| t.g).fold(None, |acc, g| Some(acc.map_or(g, |a: f64| a.max(g)))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DEFAULT_GRAVITY;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn kd_only(kd: f64) -> LagrangianSpec {
        LagrangianSpec::new(CostSpec::SquaredControl, kd, vec![], LagrangianMode::Phase1)
    }

    #[test]
    fn activation_examples() {
        assert_eq!(activation(0.0, 37.0), 0.5);
        assert!(activation(-1.0, 100.0) < 1e-40);
        assert!((activation(0.01, 200.0) - 0.5 * (1.0 + 2f64.tanh())).abs() < 1e-15);
        assert!((activation(0.01, 200.0) - 0.98201).abs() < 1e-5);
    }

    #[test]
    fn penalty_examples() {
        let spec = |k: f64, c: f64| ConstraintSpec::new(
            ConstraintKind::InputBox(BoxBounds::new(vec![-1.0], vec![1.0])),
            PenaltyGains::new(k, c),
        );
        assert_eq!(penalty(0.0, &spec(1e5, 100.0)), 0.0);
        assert!((penalty(1.0, &spec(1e5, 100.0)) - 1e5).abs() < 1e-9);
        assert!(penalty(-0.5, &spec(1e5, 200.0)) < 1e-30);
    }

    #[test]
    fn penalty_derivative_matches_differences() {
        let gains = PenaltyGains::new(3e4, 120.0);
        for g in [-0.2, -0.01, 0.0, 0.004, 0.3] {
            let h = 1e-7;
            let fd = (gains.value(g + h) - gains.value(g - h)) / (2.0 * h);
            assert!((fd - gains.derivative(g)).abs() < 1e-4 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn value_examples() {
        let di = RobotModel::double_integrator(1).unwrap();
        let phase2 = LagrangianSpec::new(CostSpec::SquaredControl, 7.0, vec![], LagrangianMode::Phase2);
        assert_eq!(lagrangian_value(&phase2, &di, &dv(&[0.0, 0.0]), &dv(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(lagrangian_value(&phase2, &di, &dv(&[0.0, 1.0]), &dv(&[1.0, 2.0])).unwrap(), 4.0);
        assert_eq!(lagrangian_value(&phase2, &di, &dv(&[0.0, 1.0]), &dv(&[0.0, 0.0])).unwrap(), 7.0);
    }

    #[test]
    fn gradient_examples() {
        let di = RobotModel::double_integrator(1).unwrap();
        let kd = 3.0;
        let g = el_gradients(&kd_only(kd), &di, &dv(&[0.0, 1.0]), &dv(&[0.0, 0.0])).unwrap();
        assert_eq!(g.dxdot, dv(&[-2.0 * kd, 0.0]));
        assert_eq!(g.dx, dv(&[0.0, 2.0 * kd]));

        let phase2 = LagrangianSpec::new(CostSpec::SquaredControl, kd, vec![], LagrangianMode::Phase2);
        let g = el_gradients(&phase2, &di, &DVector::zeros(2), &DVector::zeros(2)).unwrap();
        assert_eq!(g.dx, DVector::zeros(2));
        assert_eq!(g.dxdot, DVector::zeros(2));
    }

    #[test]
    fn two_link_gradients_match_finite_differences() {
        let model = crate::dynamics::RobotModel::planar_chain(vec![1.0, 1.0], vec![1.0, 1.0], DEFAULT_GRAVITY).unwrap();
        let constraints = vec![
            ConstraintSpec::new(
                ConstraintKind::InputBox(BoxBounds::new(vec![-4.0, -3.0], vec![4.0, 3.0])),
                PenaltyGains::new(1e3, 5.0),
            ),
            ConstraintSpec::new(
                ConstraintKind::StateBox(BoxBounds::new(vec![-1.0, -1.0], vec![1.0, 1.0])),
                PenaltyGains::new(1e3, 5.0),
            ),
            ConstraintSpec::new(
                ConstraintKind::CircleObstacle { center: [1.0, -1.0], radius: 0.5, clearance: 0.1, frames: vec![0, 1] },
                PenaltyGains::new(1e3, 5.0),
            ),
        ];
        let spec = LagrangianSpec::new(CostSpec::WeightedSquaredControl(vec![1.0, 2.0]), 10.0, constraints, LagrangianMode::Phase2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = DVector::from_iterator(4, (0..4).map(|_| rng.random_range(-1.5..1.5)));
            let xdot = DVector::from_iterator(4, (0..4).map(|_| rng.random_range(-1.5..1.5)));
            let a = el_gradients(&spec, &model, &x, &xdot).unwrap();
            let f = el_gradients_fd(&spec, &model, &x, &xdot).unwrap();
            for (p, q) in a.dx.iter().chain(a.dxdot.iter()).zip(f.dx.iter().chain(f.dxdot.iter())) {
                assert!((p - q).abs() <= 1e-5 * (1.0 + p.abs().max(q.abs())), "{p} vs {q}");
            }
        }
    }

    #[test]
    fn legacy_matches_phase2_control_effort() {
        let model = crate::dynamics::RobotModel::planar_chain(vec![1.0, 0.7], vec![0.8, 1.1], DEFAULT_GRAVITY).unwrap();
        let kd = 25.0;
        let legacy = LagrangianSpec::new(CostSpec::SquaredControl, kd, vec![], LagrangianMode::Legacy);
        let phase2 = LagrangianSpec::new(CostSpec::SquaredControl, kd, vec![], LagrangianMode::Phase2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x = DVector::from_iterator(4, (0..4).map(|_| rng.random_range(-2.0..2.0)));
            let xdot = DVector::from_iterator(4, (0..4).map(|_| rng.random_range(-2.0..2.0)));
            let a = lagrangian_value(&legacy, &model, &x, &xdot).unwrap();
            let b = lagrangian_value(&phase2, &model, &x, &xdot).unwrap();
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn inactive_penalties_are_negligible() {
        let di = RobotModel::double_integrator(1).unwrap();
        let k = 1e6;
        let c = 400.0;
        let delta = 0.1; // c * delta = 40
        let spec = LagrangianSpec::new(
            CostSpec::SquaredControl,
            1.0,
            vec![ConstraintSpec::new(
                ConstraintKind::StateBox(BoxBounds::new(vec![-1.0], vec![1.0])),
                PenaltyGains::new(k, c),
            )],
            LagrangianMode::Phase1,
        );
        let x = dv(&[1.0 - delta, 0.0]);
        let v = lagrangian_value(&spec, &di, &x, &dv(&[0.0, 0.0])).unwrap();
        assert!(v <= 1e-12 * k);
    }

    #[test]
    fn constraint_validation() {
        let di = RobotModel::double_integrator(1).unwrap();
        let bad = ConstraintSpec::new(
            ConstraintKind::StateBox(BoxBounds::new(vec![1.0], vec![-1.0])),
            PenaltyGains::new(1.0, 1.0),
        );
        assert!(bad.validate(&di).is_err());
        let bad_frame = ConstraintSpec::new(
            ConstraintKind::CircleObstacle { center: [0.0, 0.0], radius: 1.0, clearance: 0.0, frames: vec![3] },
            PenaltyGains::new(1.0, 1.0),
        );
        assert!(bad_frame.validate(&di).is_err());
        let spec = LagrangianSpec::new(CostSpec::SquaredControl, 0.0, vec![], LagrangianMode::Phase2);
        assert!(spec.validate(&di).is_err());
    }
}
