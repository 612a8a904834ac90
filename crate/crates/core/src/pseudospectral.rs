//! Chebyshev–Gauss–Lobatto grids on `[0, T]`.
//!
//! Nodes are stored ascending in physical time. The differentiation matrix
//! is built from barycentric weights with the negated-sum diagonal, and the
//! quadrature weights are Clenshaw–Curtis weights for the same nodes.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{AghfError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGrid {
    degree: usize,
    horizon: f64,
    nodes: Vec<f64>,
    /// Barycentric weights on the reference interval `[-1, 1]`.
    bary: Vec<f64>,
    diff: DMatrix<f64>,
    weights: Vec<f64>,
}

/// Builds the degree-`p` Chebyshev–Lobatto grid on `[0, horizon]`.
pub fn build_grid(degree: usize, horizon: f64) -> Result<SpectralGrid> {
    SpectralGrid::new(degree, horizon)
}

impl SpectralGrid {
    pub fn new(degree: usize, horizon: f64) -> Result<Self> {
        if degree == 0 {
            return Err(AghfError::domain("grid degree must be at least 1"));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(AghfError::domain(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        let p = degree;
        let pf = p as f64;

        // sin form keeps the grid exactly symmetric (midpoint lands on 0).
        let reference: Vec<f64> = (0..=p)
            .map(|j| {
                if j == 0 {
                    -1.0
                } else if j == p {
                    1.0
                } else {
                    (PI * (2.0 * j as f64 - pf) / (2.0 * pf)).sin()
                }
            })
            .collect();

        let bary: Vec<f64> = (0..=p)
            .map(|j| {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                if j == 0 || j == p {
                    0.5 * sign
                } else {
                    sign
                }
            })
            .collect();

        let scale = 2.0 / horizon;
        let mut diff = DMatrix::zeros(p + 1, p + 1);
        for i in 0..=p {
            let mut row_sum = 0.0;
            for j in 0..=p {
                if i != j {
                    let d = (bary[j] / bary[i]) / (reference[i] - reference[j]);
                    diff[(i, j)] = d * scale;
                    row_sum += d;
                }
            }
            diff[(i, i)] = -row_sum * scale;
        }

        let half = 0.5 * horizon;
        let nodes: Vec<f64> = reference
            .iter()
            .enumerate()
            .map(|(j, &y)| {
                if j == 0 {
                    0.0
                } else if j == p {
                    horizon
                } else {
                    half * (y + 1.0)
                }
            })
            .collect();

        let weights = clenshaw_curtis(p).into_iter().map(|w| w * half).collect();

        Ok(Self {
            degree,
            horizon,
            nodes,
            bary,
            diff,
            weights,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of nodes, `p + 1`.
    pub fn len(&self) -> usize {
        self.degree + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn diff_matrix(&self) -> &DMatrix<f64> {
        &self.diff
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Evaluates the degree-`p` interpolant of `values` (one row per node) at `t`.
    ///
    /// Times within `1e-12 * T` outside `[0, T]` are clamped onto the interval.
    pub fn interpolate(&self, values: &DMatrix<f64>, t: f64) -> Result<DVector<f64>> {
        self.check_rows(values.nrows(), "interpolate")?;
        let tol = 1e-12 * self.horizon;
        if !t.is_finite() || t < -tol || t > self.horizon + tol {
            return Err(AghfError::domain(format!(
                "interpolation time {t} outside [0, {}]",
                self.horizon
            )));
        }
        let t = t.clamp(0.0, self.horizon);
        if let Some(j) = self.nodes.iter().position(|&n| n == t) {
            return Ok(values.row(j).transpose());
        }
        let y = 2.0 * t / self.horizon - 1.0;
        let reference_node = |j: usize| 2.0 * self.nodes[j] / self.horizon - 1.0;
        let mut numer = DVector::zeros(values.ncols());
        let mut denom = 0.0;
        for j in 0..self.len() {
            let diff = y - reference_node(j);
            if diff == 0.0 {
                return Ok(values.row(j).transpose());
            }
            let c = self.bary[j] / diff;
            denom += c;
            numer += values.row(j).transpose() * c;
        }
        Ok(numer / denom)
    }

    /// Integrates node samples over `[0, T]` with the Clenshaw–Curtis rule.
    pub fn quadrature(&self, integrand: &[f64]) -> Result<f64> {
        self.check_rows(integrand.len(), "quadrature")?;
        Ok(self
            .weights
            .iter()
            .zip(integrand)
            .map(|(w, f)| w * f)
            .sum())
    }

    /// Spectral derivative at the nodes, `D * samples`.
    pub fn differentiate(&self, samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(samples.nrows(), "differentiate")?;
        Ok(&self.diff * samples)
    }

    fn check_rows(&self, rows: usize, what: &str) -> Result<()> {
        if rows != self.len() {
            return Err(AghfError::domain(format!(
                "{what}: expected {} node rows, got {rows}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Same as [`SpectralGrid::differentiate`]; fits the degree-`p` interpolant
/// through `samples` and differentiates it at the nodes.
pub fn fit_and_differentiate(grid: &SpectralGrid, samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    grid.differentiate(samples)
}

// Clenshaw–Curtis weights on [-1, 1] for the p+1 Lobatto points.
fn clenshaw_curtis(p: usize) -> Vec<f64> {
    let n = p as f64;
    let mut w = vec![0.0; p + 1];
    if p == 1 {
        return vec![1.0, 1.0];
    }
    let mut interior = vec![1.0; p - 1];
    let theta = |j: usize| PI * j as f64 / n;
    if p.is_multiple_of(2) {
        w[0] = 1.0 / (n * n - 1.0);
        w[p] = w[0];
        for k in 1..p / 2 {
            let kf = k as f64;
            for (i, v) in interior.iter_mut().enumerate() {
                *v -= 2.0 * (2.0 * kf * theta(i + 1)).cos() / (4.0 * kf * kf - 1.0);
            }
        }
        for (i, v) in interior.iter_mut().enumerate() {
            *v -= (n * theta(i + 1)).cos() / (n * n - 1.0);
        }
    } else {
        w[0] = 1.0 / (n * n);
        w[p] = w[0];
        for k in 1..=(p - 1) / 2 {
            let kf = k as f64;
            for (i, v) in interior.iter_mut().enumerate() {
                *v -= 2.0 * (2.0 * kf * theta(i + 1)).cos() / (4.0 * kf * kf - 1.0);
            }
        }
    }
    for (i, v) in interior.into_iter().enumerate() {
        w[i + 1] = 2.0 * v / n;
    }
    w
}
