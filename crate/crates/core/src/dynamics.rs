//! Rigid-body models in manipulator form `H(q) q̈ + C(q, q̇) = B u`.
//!
//! Two model families are provided: an `N`-dimensional double integrator and a
//! planar serial chain of point masses at the distal end of each link. Joint
//! angles are relative to the previous link, and `q = 0` hangs straight down.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{AghfError, Result};

/// Reciprocal condition number below which `[Fc | F]` is treated as singular.
pub const MIN_RCOND: f64 = 1e-12;

pub const DEFAULT_GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    DoubleIntegrator,
    PlanarChain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    kind: SystemKind,
    masses: Vec<f64>,
    lengths: Vec<f64>,
    gravity: f64,
    actuation: DMatrix<f64>,
    identity_actuation: bool,
}

/// Configuration and velocity halves of a state `x = [q; q̇]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePoint {
    pub position: DVector<f64>,
    pub velocity: DVector<f64>,
}

impl StatePoint {
    pub fn new(position: DVector<f64>, velocity: DVector<f64>) -> Self {
        Self { position, velocity }
    }

    /// Splits a stacked `2N` state.
    pub fn from_state(x: &[f64]) -> Self {
        let n = x.len() / 2;
        Self {
            position: DVector::from_column_slice(&x[..n]),
            velocity: DVector::from_column_slice(&x[n..2 * n]),
        }
    }

    pub fn to_state(&self) -> DVector<f64> {
        let n = self.position.len();
        let mut x = DVector::zeros(2 * n);
        x.rows_mut(0, n).copy_from(&self.position);
        x.rows_mut(n, n).copy_from(&self.velocity);
        x
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.velocity.iter()).all(|v| v.is_finite())
    }
}

/// `ẋ = fd(x) + F(x) u` together with the complement `Fc` used for extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDecomposition {
    pub drift: DVector<f64>,
    pub input: DMatrix<f64>,
    pub complement: DMatrix<f64>,
    /// `[Fc | F]`, square `2N x 2N`.
    pub augmented: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedControl {
    /// Extracted input `u`.
    pub u: DVector<f64>,
    /// Infeasibility coordinate `uc`; zero along dynamically feasible curves.
    pub uc: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlJacobians {
    /// `m x 2N`
    pub du_dx: DMatrix<f64>,
    /// `m x 2N`
    pub du_dxdot: DMatrix<f64>,
}

impl RobotModel {
    /// Unit-mass double integrator in `n` dimensions.
    pub fn double_integrator(n: usize) -> Result<Self> {
        Self::double_integrator_with_masses(vec![1.0; n])
    }

    pub fn double_integrator_with_masses(masses: Vec<f64>) -> Result<Self> {
        let n = masses.len();
        Self::build(SystemKind::DoubleIntegrator, masses, vec![0.0; n], 0.0)
    }

    pub fn planar_chain(masses: Vec<f64>, lengths: Vec<f64>, gravity: f64) -> Result<Self> {
        if masses.len() != lengths.len() {
            return Err(AghfError::domain(format!(
                "planar chain needs one length per mass ({} masses, {} lengths)",
                masses.len(),
                lengths.len()
            )));
        }
        if lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(AghfError::domain("link lengths must be positive"));
        }
        Self::build(SystemKind::PlanarChain, masses, lengths, gravity)
    }

    fn build(kind: SystemKind, masses: Vec<f64>, lengths: Vec<f64>, gravity: f64) -> Result<Self> {
        if masses.is_empty() {
            return Err(AghfError::domain("model needs at least one degree of freedom"));
        }
        if masses.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(AghfError::domain("masses must be positive"));
        }
        if !gravity.is_finite() {
            return Err(AghfError::domain("gravity must be finite"));
        }
        let n = masses.len();
        Ok(Self {
            kind,
            masses,
            lengths,
            gravity,
            actuation: DMatrix::identity(n, n),
            identity_actuation: true,
        })
    }

    /// Replaces the actuation map `B` (`N x m`, full column rank).
    pub fn with_actuation(mut self, actuation: DMatrix<f64>) -> Result<Self> {
        let n = self.dof();
        if actuation.nrows() != n || actuation.ncols() == 0 || actuation.ncols() > n {
            return Err(AghfError::domain(format!(
                "actuation map must be {n} x m with 1 <= m <= {n}, got {} x {}",
                actuation.nrows(),
                actuation.ncols()
            )));
        }
        self.identity_actuation = actuation == DMatrix::identity(n, n);
        self.actuation = actuation;
        Ok(self)
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn dof(&self) -> usize {
        self.masses.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.actuation.ncols()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.dof()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    pub fn actuation(&self) -> &DMatrix<f64> {
        &self.actuation
    }

    /// True when `B = I`, which enables the inverse-dynamics shortcut.
    pub fn is_fully_actuated(&self) -> bool {
        self.identity_actuation
    }

    pub fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dof();
        match self.kind {
            SystemKind::DoubleIntegrator => DMatrix::from_diagonal(&DVector::from_column_slice(&self.masses)),
            SystemKind::PlanarChain => {
                // H = sum_i m_i J_i^T J_i over the point masses.
                let normals = self.link_normals(q);
                let mut h = DMatrix::zeros(n, n);
                for i in 0..n {
                    let jac = jacobian_from_normals(&self.lengths, &normals, i, n);
                    h += (jac.transpose() * &jac) * self.masses[i];
                }
                h
            }
        }
    }

    /// Recursive Newton–Euler: `H(q) q̈ + C(q, q̇)`.
    pub fn inverse_dynamics(&self, q: &DVector<f64>, qd: &DVector<f64>, qdd: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.rnea(q.as_slice(), qd.as_slice(), qdd.as_slice()))
    }

    /// Coriolis and gravity torques, `C(q, q̇) = ID(q, q̇, 0)`.
    pub fn bias_term(&self, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
        let zero = vec![0.0; self.dof()];
        DVector::from_vec(self.rnea(q.as_slice(), qd.as_slice(), &zero))
    }

    /// `q̈ = H⁻¹ (B u - C)`.
    pub fn forward_dynamics(&self, q: &DVector<f64>, qd: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let h = self.mass_matrix(q);
        let rhs = &self.actuation * u - self.bias_term(q, qd);
        let chol = h
            .cholesky()
            .ok_or_else(|| AghfError::NonFinite("mass matrix factorization".into()))?;
        Ok(chol.solve(&rhs))
    }

    pub fn affine_decomposition(&self, x: &StatePoint) -> Result<AffineDecomposition> {
        let n = self.dof();
        let m = self.num_inputs();
        if !x.is_finite() {
            return Err(AghfError::NonFinite("state passed to affine decomposition".into()));
        }
        let h = self.mass_matrix(&x.position);
        let chol = h
            .cholesky()
            .ok_or(AghfError::Decomposition { rcond: 0.0 })?;
        let c = self.bias_term(&x.position, &x.velocity);

        let mut drift = DVector::zeros(2 * n);
        drift.rows_mut(0, n).copy_from(&x.velocity);
        drift.rows_mut(n, n).copy_from(&(-chol.solve(&c)));

        let mut input = DMatrix::zeros(2 * n, m);
        input.view_mut((n, 0), (n, m)).copy_from(&chol.solve(&self.actuation));

        let complement = if self.identity_actuation {
            let mut fc = DMatrix::zeros(2 * n, n);
            fc.view_mut((0, 0), (n, n)).fill_with_identity();
            fc
        } else {
            gram_schmidt_complement(&input)
        };

        let mut augmented = DMatrix::zeros(2 * n, 2 * n);
        augmented
            .view_mut((0, 0), (2 * n, 2 * n - m))
            .copy_from(&complement);
        augmented.view_mut((0, 2 * n - m), (2 * n, m)).copy_from(&input);

        let sv = augmented.singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
        if !(rcond >= MIN_RCOND) {
            return Err(AghfError::Decomposition { rcond });
        }
        Ok(AffineDecomposition {
            drift,
            input,
            complement,
            augmented,
        })
    }

    /// Extracted control `u` and infeasibility coordinate `uc` for a state and
    /// its time derivative. Uses inverse dynamics when `B = I`.
    pub fn extract_control(&self, x: &StatePoint, xdot: &DVector<f64>) -> Result<ExtractedControl> {
        if !self.identity_actuation {
            return self.extract_control_via_fbar(x, xdot);
        }
        let n = self.dof();
        if !x.is_finite() || xdot.iter().any(|v| !v.is_finite()) {
            return Err(AghfError::NonFinite("control extraction input".into()));
        }
        let qdd = xdot.rows(n, n).into_owned();
        let u = self.inverse_dynamics(&x.position, &x.velocity, &qdd);
        let uc = xdot.rows(0, n) - &x.velocity;
        Ok(ExtractedControl { u, uc })
    }

    /// Extraction by solving `[Fc | F] [uc; u] = ẋ - fd` directly.
    pub fn extract_control_via_fbar(&self, x: &StatePoint, xdot: &DVector<f64>) -> Result<ExtractedControl> {
        let n = self.dof();
        let m = self.num_inputs();
        if xdot.len() != 2 * n {
            return Err(AghfError::domain(format!("state derivative must have length {}", 2 * n)));
        }
        let dec = self.affine_decomposition(x)?;
        let rhs = xdot - &dec.drift;
        let sol = dec
            .augmented
            .lu()
            .solve(&rhs)
            .ok_or(AghfError::Decomposition { rcond: 0.0 })?;
        Ok(ExtractedControl {
            uc: sol.rows(0, 2 * n - m).into_owned(),
            u: sol.rows(2 * n - m, m).into_owned(),
        })
    }

    /// Partial derivatives of the extracted control. Requires `B = I`.
    pub fn control_derivatives(&self, x: &StatePoint, xdot: &DVector<f64>) -> Result<ControlJacobians> {
        if !self.identity_actuation {
            return Err(AghfError::Unsupported(
                "analytic control derivatives require an identity actuation map".into(),
            ));
        }
        let n = self.dof();
        let qdd = xdot.rows(n, n).into_owned();
        let (dq, dqd) = self.inverse_dynamics_derivatives(&x.position, &x.velocity, &qdd);
        let mut du_dx = DMatrix::zeros(n, 2 * n);
        du_dx.view_mut((0, 0), (n, n)).copy_from(&dq);
        du_dx.view_mut((0, n), (n, n)).copy_from(&dqd);
        let mut du_dxdot = DMatrix::zeros(n, 2 * n);
        du_dxdot
            .view_mut((0, n), (n, n))
            .copy_from(&self.mass_matrix(&x.position));
        Ok(ControlJacobians { du_dx, du_dxdot })
    }

    /// `(∂ID/∂q, ∂ID/∂q̇)` by pushing tangents through the Newton–Euler recursion.
    pub fn inverse_dynamics_derivatives(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        qdd: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.dof();
        let mut dq = DMatrix::zeros(n, n);
        let mut dqd = DMatrix::zeros(n, n);
        if self.kind == SystemKind::DoubleIntegrator {
            return (dq, dqd);
        }
        let lift = |v: &DVector<f64>| -> Vec<Dual> { v.iter().map(|&a| Dual::constant(a)).collect() };
        let qdd_d = lift(qdd);
        for dir in 0..n {
            let mut qv = lift(q);
            qv[dir].d = 1.0;
            let tau = self.rnea(&qv, &lift(qd), &qdd_d);
            for (i, t) in tau.iter().enumerate() {
                dq[(i, dir)] = t.d;
            }
            let mut qdv = lift(qd);
            qdv[dir].d = 1.0;
            let tau = self.rnea(&lift(q), &qdv, &qdd_d);
            for (i, t) in tau.iter().enumerate() {
                dqd[(i, dir)] = t.d;
            }
        }
        (dq, dqd)
    }

    /// World position of each frame. For the chain these are the distal ends
    /// of the links; for the double integrator frame `i` sits at `(q_i, 0)`.
    pub fn forward_kinematics(&self, q: &DVector<f64>) -> Vec<Vector2<f64>> {
        match self.kind {
            SystemKind::DoubleIntegrator => q.iter().map(|&qi| Vector2::new(qi, 0.0)).collect(),
            SystemKind::PlanarChain => {
                let mut theta = 0.0;
                let mut p = Vector2::zeros();
                q.iter()
                    .zip(&self.lengths)
                    .map(|(&qi, &l)| {
                        theta += qi;
                        p += Vector2::new(theta.sin(), -theta.cos()) * l;
                        p
                    })
                    .collect()
            }
        }
    }

    /// `∂p_frame / ∂q`, a `2 x N` matrix.
    pub fn frame_jacobian(&self, q: &DVector<f64>, frame: usize) -> DMatrix<f64> {
        let n = self.dof();
        match self.kind {
            SystemKind::DoubleIntegrator => {
                let mut j = DMatrix::zeros(2, n);
                j[(0, frame)] = 1.0;
                j
            }
            SystemKind::PlanarChain => jacobian_from_normals(&self.lengths, &self.link_normals(q), frame, n),
        }
    }

    fn link_normals(&self, q: &DVector<f64>) -> Vec<Vector2<f64>> {
        let mut theta = 0.0;
        q.iter()
            .map(|&qi| {
                theta += qi;
                Vector2::new(theta.cos(), theta.sin())
            })
            .collect()
    }

    fn rnea<S: Scalar>(&self, q: &[S], qd: &[S], qdd: &[S]) -> Vec<S> {
        match self.kind {
            SystemKind::DoubleIntegrator => qdd
                .iter()
                .zip(&self.masses)
                .map(|(&a, &m)| a * S::constant(m))
                .collect(),
            SystemKind::PlanarChain => planar_rnea(&self.masses, &self.lengths, self.gravity, q, qd, qdd),
        }
    }
}

fn jacobian_from_normals(lengths: &[f64], normals: &[Vector2<f64>], frame: usize, n: usize) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(2, n);
    // column j: sum_{k=j..=frame} l_k n_k
    let mut acc = Vector2::zeros();
    for k in (0..=frame).rev() {
        acc += normals[k] * lengths[k];
        jac[(0, k)] = acc.x;
        jac[(1, k)] = acc.y;
    }
    jac
}

/// Planar point-mass chain. Gravity enters as an upward base acceleration.
fn planar_rnea<S: Scalar>(masses: &[f64], lengths: &[f64], gravity: f64, q: &[S], qd: &[S], qdd: &[S]) -> Vec<S> {
    let n = masses.len();
    let mut theta = S::constant(0.0);
    let mut omega = S::constant(0.0);
    let mut alpha = S::constant(0.0);
    let mut acc = [S::constant(0.0), S::constant(gravity)];
    let mut dirs = Vec::with_capacity(n);
    let mut accs = Vec::with_capacity(n);
    for i in 0..n {
        theta = theta + q[i];
        omega = omega + qd[i];
        alpha = alpha + qdd[i];
        let (s, c) = (theta.sin(), theta.cos());
        let l = S::constant(lengths[i]);
        let e = [s, -c];
        let nrm = [c, s];
        let w2 = omega * omega;
        acc = [
            acc[0] + l * (alpha * nrm[0] - w2 * e[0]),
            acc[1] + l * (alpha * nrm[1] - w2 * e[1]),
        ];
        dirs.push(e);
        accs.push(acc);
    }
    let mut tau = vec![S::constant(0.0); n];
    let mut force = [S::constant(0.0), S::constant(0.0)];
    let mut moment = S::constant(0.0);
    for i in (0..n).rev() {
        let m = S::constant(masses[i]);
        force = [force[0] + m * accs[i][0], force[1] + m * accs[i][1]];
        let l = S::constant(lengths[i]);
        let e = dirs[i];
        moment = moment + l * (e[0] * force[1] - e[1] * force[0]);
        tau[i] = moment;
    }
    tau
}

/// Orthonormal basis of the complement of `span(F)`, built by Gram–Schmidt
/// over the canonical basis.
fn gram_schmidt_complement(input: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = input.nrows();
    let m = input.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(dim);
    for j in 0..m {
        let mut v = input.column(j).into_owned();
        for b in &basis {
            v -= b * b.dot(&v);
        }
        let norm = v.norm();
        if norm > 1e-12 {
            basis.push(v / norm);
        }
    }
    let start = basis.len();
    for k in 0..dim {
        if basis.len() - start == dim - m {
            break;
        }
        let mut v = DVector::zeros(dim);
        v[k] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                v -= b * b.dot(&v);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    let cols = &basis[start..];
    let mut fc = DMatrix::zeros(dim, dim - m);
    for (j, c) in cols.iter().enumerate().take(dim - m) {
        fc.set_column(j, c);
    }
    fc
}

trait Scalar:
    Copy + std::ops::Add<Output = Self> + std::ops::Sub<Output = Self> + std::ops::Mul<Output = Self> + std::ops::Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Forward-mode dual number carrying one directional derivative.
#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: f64,
}

impl Dual {
    fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl std::ops::Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

impl Scalar for Dual {
    fn constant(v: f64) -> Self {
        Dual::constant(v)
    }
    fn sin(self) -> Self {
        Dual {
            v: self.v.sin(),
            d: self.d * self.v.cos(),
        }
    }
    fn cos(self) -> Self {
        Dual {
            v: self.v.cos(),
            d: -self.d * self.v.sin(),
        }
    }
}
