//! Adaptive integrators for `y' = f(t, y)`.
//!
//! [`Method::Rosenbrock23`] is the linearly implicit pair of Shampine and
//! Reichelt (`ode23s`), using a dense finite-difference Jacobian. It is the
//! default for the heat flow, whose spectrum grows like `kd p⁴`.
//! [`Method::DormandPrince54`] is the explicit 5(4) pair, used for the
//! closed-loop simulation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AghfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Rosenbrock23,
    DormandPrince54,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub initial_step: f64,
    pub max_steps: usize,
    /// Steps shorter than `min_step_factor * max(|t|, 1)` count as underflow.
    pub min_step_factor: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            abs_tol: 1e-8,
            initial_step: 1e-6,
            max_steps: 100_000,
            min_step_factor: 1e-14,
        }
    }
}

/// Why an integration stopped before `t_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Failure {
    StepUnderflow { step: f64 },
    MaxSteps,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub t: f64,
    pub y: DVector<f64>,
    pub accepted: usize,
    pub rejected: usize,
    /// Set when the accept callback asked to stop.
    pub halted: bool,
    pub failure: Option<Failure>,
    /// Suggested size for the next step.
    pub next_step: f64,
}

/// What the accept callback wants the integrator to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Halt,
    /// Discard the step and retry with half the step size.
    Reject,
}

fn error_norm(err: &DVector<f64>, y0: &DVector<f64>, y1: &DVector<f64>, c: &StepControl) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..err.len() {
        let scale = c.abs_tol + c.rel_tol * y0[i].abs().max(y1[i].abs());
        worst = worst.max((err[i] / scale).abs());
    }
    worst
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Evaluates `f`, turning non-finite results into `None` so trial stages can be
/// rejected instead of aborting the run.
fn eval<F>(f: &mut F, t: f64, y: &DVector<f64>) -> Result<Option<DVector<f64>>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    match f(t, y) {
        Ok(v) if all_finite(&v) => Ok(Some(v)),
        Ok(_) | Err(AghfError::NonFinite(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn fd_jacobian<F>(f: &mut F, t: f64, y: &DVector<f64>, f0: &DVector<f64>) -> Result<Option<DMatrix<f64>>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let n = y.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut yp = y.clone();
    for k in 0..n {
        let delta = f64::EPSILON.sqrt() * y[k].abs().max(1.0);
        yp[k] = y[k] + delta;
        let delta = yp[k] - y[k];
        let Some(fp) = eval(f, t, &yp)? else {
            return Ok(None);
        };
        jac.set_column(k, &((fp - f0) / delta));
        yp[k] = y[k];
    }
    Ok(Some(jac))
}

/// Integrates from `(t0, y0)` to `t_end`. `on_accept(t, y, f(t, y))` runs after
/// every accepted step and may halt the run or veto the step.
pub fn integrate<F, A>(
    method: Method,
    mut f: F,
    t0: f64,
    y0: DVector<f64>,
    t_end: f64,
    control: &StepControl,
    mut on_accept: A,
) -> Result<Outcome>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    A: FnMut(f64, &DVector<f64>, &DVector<f64>) -> Result<Control>,
{
    let Some(f0) = eval(&mut f, t0, &y0)? else {
        return Err(AghfError::NonFinite("initial right-hand side".into()));
    };
    let mut state = State {
        t: t0,
        y: y0,
        fy: f0,
        h: control.initial_step.min(t_end - t0).max(0.0),
        accepted: 0,
        rejected: 0,
    };
    let result = match method {
        Method::Rosenbrock23 => rosenbrock23(&mut f, &mut state, t_end, control, &mut on_accept)?,
        Method::DormandPrince54 => dopri54(&mut f, &mut state, t_end, control, &mut on_accept)?,
    };
    Ok(Outcome {
        t: state.t,
        y: state.y,
        accepted: state.accepted,
        rejected: state.rejected,
        halted: result == Some(Ended::Halted),
        failure: match result {
            Some(Ended::Failed(fail)) => Some(fail),
            _ => None,
        },
        next_step: state.h,
    })
}

struct State {
    t: f64,
    y: DVector<f64>,
    fy: DVector<f64>,
    h: f64,
    accepted: usize,
    rejected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ended {
    Halted,
    Failed(Failure),
}

impl State {
    /// Common bookkeeping before attempting a step. Returns `Some` when the
    /// run must stop.
    fn guard(&mut self, t_end: f64, control: &StepControl) -> Option<Option<Ended>> {
        if self.t >= t_end {
            return Some(None);
        }
        if self.accepted + self.rejected >= control.max_steps {
            return Some(Some(Ended::Failed(Failure::MaxSteps)));
        }
        let min_step = control.min_step_factor * self.t.abs().max(1.0);
        if self.h < min_step {
            return Some(Some(Ended::Failed(Failure::StepUnderflow { step: self.h })));
        }
        if self.t + self.h > t_end || t_end - (self.t + self.h) < min_step {
            self.h = t_end - self.t;
        }
        None
    }

    fn commit<A>(&mut self, t_new: f64, y_new: DVector<f64>, f_new: DVector<f64>, t_end: f64, on_accept: &mut A) -> Result<Option<Option<Ended>>>
    where
        A: FnMut(f64, &DVector<f64>, &DVector<f64>) -> Result<Control>,
    {
        match on_accept(t_new, &y_new, &f_new)? {
            Control::Reject => {
                self.rejected += 1;
                self.h *= 0.5;
                Ok(None)
            }
            verdict => {
                self.t = if t_end - t_new <= 0.0 { t_end } else { t_new };
                self.y = y_new;
                self.fy = f_new;
                self.accepted += 1;
                Ok(match verdict {
                    Control::Halt => Some(Some(Ended::Halted)),
                    _ => None,
                })
            }
        }
    }
}

fn rosenbrock23<F, A>(f: &mut F, st: &mut State, t_end: f64, control: &StepControl, on_accept: &mut A) -> Result<Option<Ended>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    A: FnMut(f64, &DVector<f64>, &DVector<f64>) -> Result<Control>,
{
    let d = 1.0 / (2.0 + std::f64::consts::SQRT_2);
    let e32 = 6.0 + std::f64::consts::SQRT_2;
    let n = st.y.len();
    let mut jac: Option<(DMatrix<f64>, DVector<f64>)> = None;
    loop {
        if let Some(end) = st.guard(t_end, control) {
            return Ok(end);
        }
        if jac.is_none() {
            let Some(j) = fd_jacobian(f, st.t, &st.y, &st.fy)? else {
                return Err(AghfError::NonFinite("Jacobian of the right-hand side".into()));
            };
            let dt = 1e-7 * st.t.abs().max(1.0);
            let dfdt = match eval(f, st.t + dt, &st.y)? {
                Some(ft) => (ft - &st.fy) / dt,
                None => DVector::zeros(n),
            };
            jac = Some((j, dfdt));
        }
        let (j, dfdt) = jac.as_ref().expect("jacobian computed above");
        let h = st.h;
        let w = DMatrix::identity(n, n) - j * (h * d);
        let Some(lu) = Some(w.lu()).filter(|lu| lu.is_invertible()) else {
            st.rejected += 1;
            st.h *= 0.5;
            continue;
        };
        let solve = |rhs: DVector<f64>| lu.solve(&rhs).expect("invertible W");

        let k1 = solve(&st.fy + dfdt * (h * d));
        let Some(f1) = eval(f, st.t + 0.5 * h, &(&st.y + &k1 * (0.5 * h)))? else {
            st.rejected += 1;
            st.h *= 0.25;
            continue;
        };
        let k2 = solve(&f1 - &k1) + &k1;
        let y_new = &st.y + &k2 * h;
        let Some(f2) = eval(f, st.t + h, &y_new)? else {
            st.rejected += 1;
            st.h *= 0.25;
            continue;
        };
        let k3 = solve(&f2 - (&k2 - &f1) * e32 - (&k1 - &st.fy) * 2.0 + dfdt * (h * d));
        let err = (&k1 - &k2 * 2.0 + &k3) * (h / 6.0);
        let e = error_norm(&err, &st.y, &y_new, control);
        if !e.is_finite() || e > 1.0 {
            st.rejected += 1;
            let factor = if e.is_finite() { (0.9 * e.powf(-1.0 / 3.0)).max(0.2) } else { 0.2 };
            st.h *= factor;
            continue;
        }
        let factor = if e == 0.0 { 5.0 } else { (0.9 * e.powf(-1.0 / 3.0)).clamp(0.2, 5.0) };
        let accepted_before = st.accepted;
        if let Some(end) = st.commit(st.t + h, y_new, f2, t_end, on_accept)? {
            return Ok(end);
        }
        if st.accepted > accepted_before {
            st.h = h * factor;
            jac = None;
        }
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn dopri54<F, A>(f: &mut F, st: &mut State, t_end: f64, control: &StepControl, on_accept: &mut A) -> Result<Option<Ended>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    A: FnMut(f64, &DVector<f64>, &DVector<f64>) -> Result<Control>,
{
    'steps: loop {
        if let Some(end) = st.guard(t_end, control) {
            return Ok(end);
        }
        let h = st.h;
        let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
        k.push(st.fy.clone());
        let mut y_new = st.y.clone();
        for s in 1..7 {
            let mut ys = st.y.clone();
            for (a, ki) in A[s].iter().zip(&k) {
                if *a != 0.0 {
                    ys.axpy(h * a, ki, 1.0);
                }
            }
            let Some(ks) = eval(f, st.t + C[s] * h, &ys)? else {
                st.rejected += 1;
                st.h *= 0.25;
                continue 'steps;
            };
            if s == 6 {
                y_new = ys;
            }
            k.push(ks);
        }
        let mut err = DVector::zeros(st.y.len());
        for (e, ki) in E.iter().zip(&k) {
            if *e != 0.0 {
                err.axpy(h * e, ki, 1.0);
            }
        }
        let e = error_norm(&err, &st.y, &y_new, control);
        if !e.is_finite() || e > 1.0 {
            st.rejected += 1;
            let factor = if e.is_finite() { (0.9 * e.powf(-0.2)).max(0.2) } else { 0.2 };
            st.h *= factor;
            continue;
        }
        let factor = if e == 0.0 { 5.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 5.0) };
        let f_new = k.pop().expect("seven stages");
        let accepted_before = st.accepted;
        if let Some(end) = st.commit(st.t + h, y_new, f_new, t_end, on_accept)? {
            return Ok(end);
        }
        if st.accepted > accepted_before {
            st.h = h * factor;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(method: Method, lambda: f64, t_end: f64) -> Outcome {
        let control = StepControl {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            initial_step: 1e-4,
            ..Default::default()
        };
        integrate(
            method,
            |_t, y| Ok(y * lambda),
            0.0,
            DVector::from_element(1, 1.0),
            t_end,
            &control,
            |_, _, _| Ok(Control::Continue),
        )
        .unwrap()
    }

    #[test]
    fn exponential_decay_both_methods() {
        for method in [Method::Rosenbrock23, Method::DormandPrince54] {
            let out = run(method, -2.0, 1.0);
            assert_eq!(out.t, 1.0);
            assert!((out.y[0] - (-2.0f64).exp()).abs() < 1e-6, "{method:?}: {}", out.y[0]);
        }
    }

    #[test]
    fn rosenbrock_handles_stiff_decay_cheaply() {
        let out = run(Method::Rosenbrock23, -1e8, 1.0);
        assert!(out.y[0].abs() < 1e-8);
        // an explicit method would need on the order of 1e8 steps here
        assert!(out.accepted < 5_000, "{} steps", out.accepted);
    }

    #[test]
    fn time_dependent_rhs() {
        // y' = cos t, y(0) = 0
        for method in [Method::Rosenbrock23, Method::DormandPrince54] {
            let out = integrate(
                method,
                |t, _y| Ok(DVector::from_element(1, t.cos())),
                0.0,
                DVector::zeros(1),
                2.0,
                &StepControl { rel_tol: 1e-9, abs_tol: 1e-11, ..Default::default() },
                |_, _, _| Ok(Control::Continue),
            )
            .unwrap();
            assert!((out.y[0] - 2f64.sin()).abs() < 1e-6, "{method:?}");
        }
    }

    #[test]
    fn halt_and_max_steps() {
        let control = StepControl { max_steps: 3, initial_step: 1e-3, ..Default::default() };
        let out = integrate(
            Method::DormandPrince54,
            |_t, y| Ok(-y),
            0.0,
            DVector::from_element(1, 1.0),
            10.0,
            &control,
            |_, _, _| Ok(Control::Continue),
        )
        .unwrap();
        assert_eq!(out.failure, Some(Failure::MaxSteps));

        let out = integrate(
            Method::DormandPrince54,
            |_t, y| Ok(-y),
            0.0,
            DVector::from_element(1, 1.0),
            10.0,
            &StepControl::default(),
            |_, _, _| Ok(Control::Halt),
        )
        .unwrap();
        assert!(out.halted);
        assert_eq!(out.accepted, 1);
    }

    #[test]
    fn vetoed_steps_underflow() {
        let out = integrate(
            Method::Rosenbrock23,
            |_t, y| Ok(-y),
            0.0,
            DVector::from_element(1, 1.0),
            1.0,
            &StepControl::default(),
            |_, _, _| Ok(Control::Reject),
        )
        .unwrap();
        assert!(matches!(out.failure, Some(Failure::StepUnderflow { .. })));
        assert_eq!(out.accepted, 0);
    }
}
