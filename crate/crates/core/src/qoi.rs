//! Learned quantity-of-interest maps and maximal updated density estimation.
//!
//! The measurement stream is compressed into a low-dimensional QoI through a
//! principal component analysis of the noise-scaled residual matrix
//! `X_ij = (M_ij - d_j) / sigma_j` (samples by measurements).  Components are
//! learned on the column-mean-centered residuals but applied to the raw ones:
//! centering isolates the parameter-driven variation for the directions,
//! while the uncentered application keeps the observed-versus-predicted
//! offset that carries the update signal.  Under this scaling the observed
//! density on QoI space is a product of standard normals.
//!
//! The maximal updated density (MUD) point is the ensemble sample maximizing
//! weight times ratio.  For linear maps with Gaussian initial densities the
//! closed-form solution is available in `linear_gaussian_mud` and serves as
//! the oracle for the sample path.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dci::{wdci, DciResult, ObservedDensity};
use crate::error::{Error, Result};
use crate::sequential::ParameterEnsemble;

/// Noise-scaled residuals of simulated measurements against observed data.
#[derive(Clone, Debug)]
pub struct ResidualMatrix {
    pub values: DMatrix<f64>,
}

/// Build `X_ij = (M_ij - d_j) / sigma_j` from a `k x n` simulated-measurement
/// matrix, length-`n` data, and length-`n` noise deviations.
pub fn residual_matrix(
    simulated: &DMatrix<f64>,
    data: &[f64],
    sigmas: &[f64],
) -> Result<ResidualMatrix> {
    let n = simulated.ncols();
    if data.len() != n {
        return Err(Error::DimensionMismatch {
            context: "residual data length",
            expected: n,
            found: data.len(),
        });
    }
    if sigmas.len() != n {
        return Err(Error::DimensionMismatch {
            context: "residual sigma length",
            expected: n,
            found: sigmas.len(),
        });
    }
    for (j, s) in sigmas.iter().enumerate() {
        if !s.is_finite() || *s <= 0.0 {
            return Err(Error::InvalidNoiseModel {
                index: j,
                sigma: *s,
            });
        }
    }
    if data.iter().any(|d| !d.is_finite()) || simulated.iter().any(|m| !m.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite measurement in residual construction".into(),
        ));
    }
    let mut values = simulated.clone();
    for j in 0..n {
        let d = data[j];
        let inv = 1.0 / sigmas[j];
        for i in 0..values.nrows() {
            values[(i, j)] = (values[(i, j)] - d) * inv;
        }
    }
    Ok(ResidualMatrix { values })
}

/// Whether component directions are learned on centered or raw residuals.
/// Centered is the default; the raw variant exists for comparison studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaCentering {
    #[default]
    Centered,
    Raw,
}

/// A learned linear QoI map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QoiMap {
    /// `q x n`, rows orthonormal.
    pub components: DMatrix<f64>,
    /// Data variance captured per component (squared singular value over
    /// `k - 1`), nonincreasing.
    pub explained_variance: DVector<f64>,
    /// Column means used when learning the directions.
    pub column_means: DVector<f64>,
    pub q: usize,
}

fn sign_normalize_rows(components: &mut DMatrix<f64>) {
    for r in 0..components.nrows() {
        let mut best = 0usize;
        let mut best_mag = -1.0f64;
        for c in 0..components.ncols() {
            let mag = components[(r, c)].abs();
            if mag > best_mag {
                best_mag = mag;
                best = c;
            }
        }
        if components[(r, best)] < 0.0 {
            for c in 0..components.ncols() {
                components[(r, c)] = -components[(r, c)];
            }
        }
    }
}

/// Learn the top-`q` principal directions of the residual matrix.
pub fn learn_qpca(x: &ResidualMatrix, q: usize) -> Result<QoiMap> {
    learn_qpca_with(x, q, PcaCentering::Centered)
}

/// As `learn_qpca`, with explicit centering behavior.
pub fn learn_qpca_with(x: &ResidualMatrix, q: usize, centering: PcaCentering) -> Result<QoiMap> {
    let k = x.values.nrows();
    let n = x.values.ncols();
    if k < 2 {
        return Err(Error::InsufficientSamples {
            context: "component learning",
            required: 2,
            got: k,
        });
    }
    if q == 0 {
        return Err(Error::InvalidArgument("component count must be >= 1".into()));
    }

    let mut column_means = DVector::zeros(n);
    for j in 0..n {
        column_means[j] = x.values.column(j).sum() / k as f64;
    }
    let mut xc = x.values.clone();
    if centering == PcaCentering::Centered {
        for j in 0..n {
            let m = column_means[j];
            for i in 0..k {
                xc[(i, j)] -= m;
            }
        }
    }

    // Squared singular values and right singular vectors through the smaller
    // of the two Gram matrices.
    let (mut sq_singulars, mut right_vectors): (Vec<f64>, Vec<DVector<f64>>) = if n <= k {
        let c = xc.transpose() * &xc; // n x n
        let eig = c.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        (
            order.iter().map(|&i| eig.eigenvalues[i]).collect(),
            order
                .iter()
                .map(|&i| eig.eigenvectors.column(i).into_owned())
                .collect(),
        )
    } else {
        let g = &xc * xc.transpose(); // k x k
        let eig = g.symmetric_eigen();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut sq = Vec::new();
        let mut vecs = Vec::new();
        for &i in &order {
            let lambda = eig.eigenvalues[i];
            sq.push(lambda);
            if lambda > 0.0 {
                let u = eig.eigenvectors.column(i);
                let v = (xc.transpose() * u) / lambda.sqrt();
                vecs.push(v);
            } else {
                vecs.push(DVector::zeros(n));
            }
        }
        (sq, vecs)
    };

    // Numerical rank of the (possibly centered) residual cloud.
    let max_sq = sq_singulars.first().copied().unwrap_or(0.0).max(0.0);
    let tol = max_sq * (k.max(n) as f64) * f64::EPSILON;
    let rank = sq_singulars.iter().filter(|&&s| s > tol && s > 0.0).count();
    if q > rank {
        return Err(Error::RankDeficient {
            requested: q,
            achievable: rank,
        });
    }
    sq_singulars.truncate(q);
    right_vectors.truncate(q);

    let mut components = DMatrix::zeros(q, n);
    for (r, v) in right_vectors.iter().enumerate() {
        for c in 0..n {
            components[(r, c)] = v[c];
        }
    }
    sign_normalize_rows(&mut components);

    let explained_variance =
        DVector::from_iterator(q, sq_singulars.iter().map(|s| s / (k as f64 - 1.0)));

    Ok(QoiMap {
        components,
        explained_variance,
        column_means,
        q,
    })
}

/// Apply a learned map to (uncentered) residual rows: `X * P^T`.
pub fn apply_qpca(map: &QoiMap, x: &ResidualMatrix) -> Result<DMatrix<f64>> {
    if x.values.ncols() != map.components.ncols() {
        return Err(Error::DimensionMismatch {
            context: "QoI map measurement count",
            expected: map.components.ncols(),
            found: x.values.ncols(),
        });
    }
    Ok(&x.values * map.components.transpose())
}

/// One full sample-based MUD estimate.
#[derive(Clone, Debug)]
pub struct MudSolution {
    pub mud_point: DVector<f64>,
    pub mud_index: usize,
    pub dci: DciResult,
    pub qoi_map: QoiMap,
    pub qoi_samples: DMatrix<f64>,
}

/// Estimate the MUD point from data, noise model, ensemble, and the
/// simulated-measurement matrix (`k x n`, rows aligned with the ensemble).
pub fn mud_estimate(
    data: &[f64],
    sigmas: &[f64],
    ensemble: &ParameterEnsemble,
    simulated: &DMatrix<f64>,
    q: usize,
) -> Result<MudSolution> {
    mud_estimate_with(data, sigmas, ensemble, simulated, q, PcaCentering::Centered)
}

/// As `mud_estimate`, with explicit centering behavior for the learned map.
pub fn mud_estimate_with(
    data: &[f64],
    sigmas: &[f64],
    ensemble: &ParameterEnsemble,
    simulated: &DMatrix<f64>,
    q: usize,
    centering: PcaCentering,
) -> Result<MudSolution> {
    if simulated.nrows() != ensemble.size() {
        return Err(Error::DimensionMismatch {
            context: "simulated rows vs ensemble size",
            expected: ensemble.size(),
            found: simulated.nrows(),
        });
    }
    let x = residual_matrix(simulated, data, sigmas)?;
    let map = learn_qpca_with(&x, q, centering)?;
    let qoi_samples = apply_qpca(&map, &x)?;
    let dci = wdci(
        &qoi_samples,
        Some(&ensemble.weights),
        &ObservedDensity::StandardNormal { dim: q },
    )?;

    // Highest weight-times-ratio wins; ties go to the lowest index.
    let mut mud_index = 0usize;
    let mut best = f64::NEG_INFINITY;
    for i in 0..ensemble.size() {
        let score = ensemble.weights[i] * dci.ratios[i];
        if score > best {
            best = score;
            mud_index = i;
        }
    }
    let mud_point = ensemble.samples.row(mud_index).transpose();

    Ok(MudSolution {
        mud_point,
        mud_index,
        dci,
        qoi_map: map,
        qoi_samples,
    })
}

/// A linear-Gaussian problem with map `Q(x) = A x + b`, Gaussian initial
/// density, and Gaussian observed density on QoI space.
#[derive(Clone, Debug)]
pub struct LinearGaussianProblem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lambda_init: DVector<f64>,
    pub sigma_init: DMatrix<f64>,
    pub sigma_obs: DMatrix<f64>,
}

/// Closed-form MUD point and updated covariance for the linear-Gaussian case:
///
/// ```text
/// mud = m0 + S0 A' Sp^-1 (-b - A m0)
/// cov = S0 - S0 A' Sp^-1 (Sp - Sobs) Sp^-1 A S0,   Sp = A S0 A'
/// ```
pub fn linear_gaussian_mud(
    problem: &LinearGaussianProblem,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let q = problem.a.nrows();
    let p = problem.a.ncols();
    if problem.lambda_init.len() != p
        || problem.sigma_init.nrows() != p
        || problem.sigma_init.ncols() != p
    {
        return Err(Error::DimensionMismatch {
            context: "initial mean/covariance dimension",
            expected: p,
            found: problem.lambda_init.len(),
        });
    }
    if problem.b.len() != q || problem.sigma_obs.nrows() != q || problem.sigma_obs.ncols() != q {
        return Err(Error::DimensionMismatch {
            context: "QoI offset/observed covariance dimension",
            expected: q,
            found: problem.b.len(),
        });
    }
    let sp = &problem.a * &problem.sigma_init * problem.a.transpose();
    let chol = sp.clone().cholesky().ok_or(Error::SingularPrediction)?;
    let sp_inv = chol.inverse();
    let gain = &problem.sigma_init * problem.a.transpose() * &sp_inv;
    let innovation = -&problem.b - &problem.a * &problem.lambda_init;
    let mud = &problem.lambda_init + &gain * innovation;
    let cov = &problem.sigma_init - &gain * (&sp - &problem.sigma_obs) * gain.transpose();
    Ok((mud, cov))
}
