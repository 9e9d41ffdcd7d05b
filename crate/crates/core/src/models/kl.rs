//! Squared-exponential random-field basis on a square grid.
//!
//! The covariance sigma_f^2 exp(-||x-x'||^2 / (2 l^2)) separates across
//! coordinates, so the Nystrom eigenproblem on a tensor grid factors into
//! one small 1D eigenproblem: the 2D eigenpairs are products of 1D pairs.
//! This is exactly the dense quadrature-symmetrized eigensystem, computed
//! without forming the grid-by-grid covariance matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform square grid, nodes flattened x-major: `idx = ix * n + iy`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2d {
    n: usize,
    lower: f64,
    upper: f64,
}

impl Grid2d {
    pub fn new(n: usize, lower: f64, upper: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument("grid needs at least 2 nodes".into()));
        }
        if !(lower < upper) {
            return Err(Error::InvalidArgument("grid bounds must be ordered".into()));
        }
        Ok(Self { n, lower, upper })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn h(&self) -> f64 {
        (self.upper - self.lower) / (self.n - 1) as f64
    }

    pub fn node_count(&self) -> usize {
        self.n * self.n
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lower + i as f64 * self.h()
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix * self.n + iy
    }

    pub fn node(&self, idx: usize) -> [f64; 2] {
        [self.coord(idx / self.n), self.coord(idx % self.n)]
    }

    /// Trapezoid quadrature weights along one axis.
    pub fn quad_weights_1d(&self) -> DVector<f64> {
        let h = self.h();
        let mut w = DVector::from_element(self.n, h);
        w[0] = h / 2.0;
        w[self.n - 1] = h / 2.0;
        w
    }

    /// Tensor-product quadrature weights over all nodes.
    pub fn quad_weights(&self) -> DVector<f64> {
        let w1 = self.quad_weights_1d();
        let mut w = DVector::zeros(self.node_count());
        for ix in 0..self.n {
            for iy in 0..self.n {
                w[self.index(ix, iy)] = w1[ix] * w1[iy];
            }
        }
        w
    }
}

/// Truncated eigen-expansion of a log-diffusivity random field.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KlField {
    pub mean_log: f64,
    /// Nonincreasing, positive, length M.
    pub eigenvalues: DVector<f64>,
    /// M x node_count, quadrature-orthonormal rows.
    pub modes: DMatrix<f64>,
    /// Set when the field represents one realization.
    pub coefficients: Option<DVector<f64>>,
    pub correlation_length: f64,
    pub marginal_std: f64,
    pub grid: Grid2d,
    /// Retained spectral mass: sum of kept eigenvalues over the full trace.
    pub energy_fraction: f64,
}

impl KlField {
    pub fn mode_count(&self) -> usize {
        self.eigenvalues.len()
    }
}

fn sign_normalize(v: &mut DVector<f64>) {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        *v *= -1.0;
    }
}

pub fn kl_decompose(
    grid: Grid2d,
    mean_log: f64,
    marginal_std: f64,
    correlation_length: f64,
    m: usize,
) -> Result<KlField> {
    if !(marginal_std > 0.0) || !(correlation_length > 0.0) {
        return Err(Error::InvalidArgument(
            "field std and correlation length must be positive".into(),
        ));
    }
    if m == 0 || m > grid.node_count() {
        return Err(Error::InvalidArgument(format!(
            "mode count {m} outside 1..={}",
            grid.node_count()
        )));
    }
    let n = grid.n();
    let w1 = grid.quad_weights_1d();
    let sqrt_w: DVector<f64> = w1.map(f64::sqrt);

    // One-axis kernel, quadrature-symmetrized.
    let mut b1 = DMatrix::zeros(n, n);
    let denom = 2.0 * correlation_length * correlation_length;
    for i in 0..n {
        for j in 0..=i {
            let d = grid.coord(i) - grid.coord(j);
            let v = (-d * d / denom).exp() * sqrt_w[i] * sqrt_w[j];
            b1[(i, j)] = v;
            b1[(j, i)] = v;
        }
    }
    let eig = b1.symmetric_eigen();

    // Sort the axis eigenpairs by value, descending.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let mu: Vec<f64> = order.iter().map(|i| eig.eigenvalues[*i]).collect();
    let tol = mu[0].max(0.0) * n as f64 * f64::EPSILON;
    let positive = mu.iter().take_while(|v| **v > tol).count();
    if positive == 0 {
        return Err(Error::RankDeficient {
            requested: m,
            achievable: 0,
        });
    }
    // Axis modes, orthonormal under the 1D quadrature weights.
    let phi: Vec<DVector<f64>> = order
        .iter()
        .map(|i| {
            let u = eig.eigenvectors.column(*i);
            DVector::from_fn(n, |r, _| u[r] / sqrt_w[r])
        })
        .collect();

    // All numerically positive 2D products, sorted descending; ties broken
    // lexicographically on the axis indices.
    let var = marginal_std * marginal_std;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(positive * positive);
    for a in 0..positive {
        for b in 0..positive {
            pairs.push((var * mu[a] * mu[b], a, b));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    if m > pairs.len() {
        return Err(Error::RankDeficient {
            requested: m,
            achievable: pairs.len(),
        });
    }

    let trace: f64 = pairs.iter().map(|p| p.0).sum();
    let kept: f64 = pairs.iter().take(m).map(|p| p.0).sum();

    let mut eigenvalues = DVector::zeros(m);
    let mut modes = DMatrix::zeros(m, grid.node_count());
    for (row, (val, a, b)) in pairs.iter().take(m).enumerate() {
        eigenvalues[row] = *val;
        let mut mode = DVector::zeros(grid.node_count());
        for ix in 0..n {
            for iy in 0..n {
                mode[grid.index(ix, iy)] = phi[*a][ix] * phi[*b][iy];
            }
        }
        sign_normalize(&mut mode);
        modes.set_row(row, &mode.transpose());
    }

    Ok(KlField {
        mean_log,
        eigenvalues,
        modes,
        coefficients: None,
        correlation_length,
        marginal_std,
        grid,
        energy_fraction: kept / trace,
    })
}

/// Diffusivity values at the grid nodes for one coefficient vector:
/// `exp(mean_log + sum_j sqrt(lambda_j) xi_j psi_j)`.
pub fn kl_realize(field: &KlField, coefficients: &DVector<f64>) -> Result<DVector<f64>> {
    if coefficients.len() != field.mode_count() {
        return Err(Error::DimensionMismatch {
            context: "field coefficient count",
            expected: field.mode_count(),
            found: coefficients.len(),
        });
    }
    let mut log_field = DVector::from_element(field.grid.node_count(), field.mean_log);
    for j in 0..field.mode_count() {
        let scale = field.eigenvalues[j].sqrt() * coefficients[j];
        log_field.axpy(scale, &field.modes.row(j).transpose(), 1.0);
    }
    Ok(log_field.map(f64::exp))
}
