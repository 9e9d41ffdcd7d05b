//! Weighted Gaussian kernel density estimation with Scott's-rule bandwidths.
//!
//! A density is represented by a weighted sample cloud: each support point
//! carries a product Gaussian kernel with one bandwidth per dimension.  The
//! evaluated density is the weight-normalized kernel sum
//!
//! ```text
//! f(y) = (1 / sum_i w_i) * sum_i w_i * prod_j K_{h_j}(y_j - x_ij)
//! ```
//!
//! Bandwidths follow Scott's rule generalized to weighted samples: the sample
//! count is replaced by the effective count `(sum w)^2 / sum w^2` and the
//! per-dimension spread by the weighted standard deviation, so uniform weights
//! reduce the rule to its textbook form and scaling all weights by a constant
//! changes nothing.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT_TWO_PI: f64 = 2.5066282746310002;

/// A fitted weighted kernel density estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityEstimate {
    points: DMatrix<f64>,
    weights: DVector<f64>,
    bandwidths: DVector<f64>,
    /// prod_j 1 / (h_j * sqrt(2 pi)), the shared kernel normalizer.
    norm_const: f64,
}

impl DensityEstimate {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn bandwidths(&self) -> &DVector<f64> {
        &self.bandwidths
    }

    /// Density at a single point, given as a slice of length `dim`.
    pub fn eval(&self, query: &[f64]) -> f64 {
        debug_assert_eq!(query.len(), self.dim());
        let mut acc = 0.0;
        for i in 0..self.points.nrows() {
            let mut z2 = 0.0;
            for j in 0..self.points.ncols() {
                let z = (query[j] - self.points[(i, j)]) / self.bandwidths[j];
                z2 += z * z;
            }
            acc += self.weights[i] * (-0.5 * z2).exp();
        }
        acc * self.norm_const / self.weights.sum()
    }

    /// Densities at each row of `queries`.  Rows are independent, so the
    /// batch is evaluated in parallel; per-query summation order is fixed,
    /// keeping results identical to the scalar path.
    pub fn eval_batch(&self, queries: &DMatrix<f64>) -> Result<DVector<f64>> {
        if queries.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "density query dimension",
                expected: self.dim(),
                found: queries.ncols(),
            });
        }
        let rows: Vec<f64> = (0..queries.nrows())
            .into_par_iter()
            .map(|r| {
                let row: Vec<f64> = queries.row(r).iter().copied().collect();
                self.eval(&row)
            })
            .collect();
        Ok(DVector::from_vec(rows))
    }

    /// Draw `count` points: pick a support point by weight, then perturb each
    /// coordinate with that dimension's kernel.
    pub fn sample_matrix<R: Rng>(&self, rng: &mut R, count: usize) -> Result<DMatrix<f64>> {
        let index = WeightedIndex::new(self.weights.iter().copied()).map_err(|e| {
            Error::InvalidWeights {
                reason: format!("cannot sample from estimate: {e}"),
            }
        })?;
        let q = self.dim();
        let mut out = DMatrix::zeros(count, q);
        for r in 0..count {
            let i = index.sample(rng);
            for j in 0..q {
                let noise: f64 = StandardNormal.sample(rng);
                out[(r, j)] = self.points[(i, j)] + self.bandwidths[j] * noise;
            }
        }
        Ok(out)
    }
}

fn validate_weights(weights: &DVector<f64>, k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(Error::DimensionMismatch {
            context: "weight vector length",
            expected: k,
            found: weights.len(),
        });
    }
    for (i, w) in weights.iter().enumerate() {
        if !w.is_finite() || *w < 0.0 {
            return Err(Error::InvalidWeights {
                reason: format!("weight {i} is {w}"),
            });
        }
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(Error::WeightCollapse);
    }
    Ok(())
}

/// Scott's-rule bandwidth per dimension for a weighted sample cloud.
///
/// `h_j = k_eff^(-1/(q+4)) * s_j` with `k_eff = (sum w)^2 / sum w^2` and
/// `s_j` the weighted standard deviation of dimension `j` (denominator
/// `V1 - V2/V1`, which reduces to `k - 1` for unit weights).
pub fn scott_bandwidths(
    points: &DMatrix<f64>,
    weights: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let k = points.nrows();
    let q = points.ncols();
    if k < 2 {
        return Err(Error::InsufficientSamples {
            context: "bandwidth selection",
            required: 2,
            got: k,
        });
    }
    if q == 0 {
        return Err(Error::InvalidArgument("no dimensions to fit".into()));
    }
    for v in points.iter() {
        if !v.is_finite() {
            return Err(Error::InvalidArgument("non-finite support point".into()));
        }
    }
    let ones;
    let w = match weights {
        Some(w) => {
            validate_weights(w, k)?;
            w
        }
        None => {
            ones = DVector::from_element(k, 1.0);
            &ones
        }
    };
    let v1: f64 = w.sum();
    let v2: f64 = w.iter().map(|x| x * x).sum();
    let k_eff = v1 * v1 / v2;
    let denom = v1 - v2 / v1;
    if denom <= 0.0 {
        // All mass on a single point: no spread information.
        return Err(Error::InsufficientSamples {
            context: "bandwidth selection",
            required: 2,
            got: 1,
        });
    }
    let factor = k_eff.powf(-1.0 / (q as f64 + 4.0));
    let mut h = DVector::zeros(q);
    for j in 0..q {
        let mean: f64 = (0..k).map(|i| w[i] * points[(i, j)]).sum::<f64>() / v1;
        let var: f64 = (0..k)
            .map(|i| {
                let d = points[(i, j)] - mean;
                w[i] * d * d
            })
            .sum::<f64>()
            / denom;
        if var <= 0.0 || !var.is_finite() {
            return Err(Error::DegenerateDimension { dim: j });
        }
        h[j] = factor * var.sqrt();
    }
    Ok(h)
}

/// Fit a weighted KDE with Scott's-rule bandwidths.  `weights = None` means
/// unit weights.
pub fn wkde_fit(points: &DMatrix<f64>, weights: Option<&DVector<f64>>) -> Result<DensityEstimate> {
    let bandwidths = scott_bandwidths(points, weights)?;
    wkde_fit_with_bandwidths(points, weights, &bandwidths)
}

/// Fit with caller-chosen bandwidths.  Intended for tests and sensitivity
/// studies; bandwidths must be positive and finite.
pub fn wkde_fit_with_bandwidths(
    points: &DMatrix<f64>,
    weights: Option<&DVector<f64>>,
    bandwidths: &DVector<f64>,
) -> Result<DensityEstimate> {
    let k = points.nrows();
    let q = points.ncols();
    if k == 0 || q == 0 {
        return Err(Error::InvalidArgument("empty support".into()));
    }
    if bandwidths.len() != q {
        return Err(Error::DimensionMismatch {
            context: "bandwidth vector length",
            expected: q,
            found: bandwidths.len(),
        });
    }
    for (j, h) in bandwidths.iter().enumerate() {
        if !h.is_finite() || *h <= 0.0 {
            return Err(Error::DegenerateDimension { dim: j });
        }
    }
    let w = match weights {
        Some(w) => {
            validate_weights(w, k)?;
            w.clone()
        }
        None => DVector::from_element(k, 1.0),
    };
    let norm_const = bandwidths.iter().map(|h| 1.0 / (h * SQRT_TWO_PI)).product();
    Ok(DensityEstimate {
        points: points.clone(),
        weights: w,
        bandwidths: bandwidths.clone(),
        norm_const,
    })
}

/// Densities of `estimate` at each row of `queries`.
pub fn density_eval(estimate: &DensityEstimate, queries: &DMatrix<f64>) -> Result<DVector<f64>> {
    estimate.eval_batch(queries)
}
