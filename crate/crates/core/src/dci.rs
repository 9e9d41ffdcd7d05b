//! Weighted data-consistent inversion on a sample cloud.
//!
//! Given samples of a quantity-of-interest map and an observed density on the
//! same space, `wdci` fits the predicted density as a weighted KDE, forms the
//! pointwise ratio `r = observed / predicted` at each sample, and reports two
//! diagnostics:
//!
//! * `expected_ratio`, the weighted mean of `r`.  Values near 1 certify that
//!   the predicted density dominates the observed one, which is the validity
//!   condition for a ratio-based update.
//! * `kl_dci`, the weighted mean of `r * ln r`.  This is simultaneously the
//!   information gained by the update over the initial density and the
//!   divergence of the observed density from the predicted one.
//!
//! Both use weights normalized to mean one, so weight scale never matters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{wkde_fit, DensityEstimate};

/// Predicted densities below this are treated as numerically absent.
pub const PREDICTED_FLOOR: f64 = 1e-300;
/// Observed densities above this count as real mass when the predicted
/// density has underflowed.
pub const OBSERVED_MASS_FLOOR: f64 = 1e-12;

const LN_TWO_PI: f64 = 1.8378770664093453;

/// Observed density over QoI space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ObservedDensity {
    /// Product of `dim` standard normals.
    StandardNormal { dim: usize },
    /// Independent Gaussian per dimension with the given variances.
    Gaussian {
        mean: DVector<f64>,
        variances: DVector<f64>,
    },
    /// One-dimensional density tabulated on an increasing grid, linearly
    /// interpolated inside the grid and zero outside.
    Grid1d { xs: Vec<f64>, pdf: Vec<f64> },
    /// A fitted estimate used as the observed density.  Setting this to the
    /// predicted fit itself makes every ratio exactly one, which is the
    /// self-consistency hook used in tests.
    Kde(DensityEstimate),
}

impl ObservedDensity {
    pub fn dim(&self) -> usize {
        match self {
            ObservedDensity::StandardNormal { dim } => *dim,
            ObservedDensity::Gaussian { mean, .. } => mean.len(),
            ObservedDensity::Grid1d { .. } => 1,
            ObservedDensity::Kde(est) => est.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ObservedDensity::StandardNormal { dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidArgument("observed dimension is 0".into()));
                }
            }
            ObservedDensity::Gaussian { mean, variances } => {
                if mean.len() != variances.len() {
                    return Err(Error::DimensionMismatch {
                        context: "observed Gaussian variances",
                        expected: mean.len(),
                        found: variances.len(),
                    });
                }
                if variances.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                    return Err(Error::InvalidArgument(
                        "observed Gaussian variance must be positive".into(),
                    ));
                }
            }
            ObservedDensity::Grid1d { xs, pdf } => {
                if xs.len() != pdf.len() || xs.len() < 2 {
                    return Err(Error::InvalidArgument(
                        "grid density needs matching xs/pdf of length >= 2".into(),
                    ));
                }
                if xs.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidArgument(
                        "grid density abscissae must increase".into(),
                    ));
                }
                if pdf.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::InvalidArgument(
                        "grid density values must be nonnegative".into(),
                    ));
                }
            }
            ObservedDensity::Kde(_) => {}
        }
        Ok(())
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        match self {
            ObservedDensity::StandardNormal { dim } => {
                debug_assert_eq!(point.len(), *dim);
                let z2: f64 = point.iter().map(|x| x * x).sum();
                (-0.5 * (z2 + *dim as f64 * LN_TWO_PI)).exp()
            }
            ObservedDensity::Gaussian { mean, variances } => {
                let mut log_p = 0.0;
                for j in 0..mean.len() {
                    let d = point[j] - mean[j];
                    log_p += -0.5 * (d * d / variances[j] + variances[j].ln() + LN_TWO_PI);
                }
                log_p.exp()
            }
            ObservedDensity::Grid1d { xs, pdf } => {
                let x = point[0];
                if x < xs[0] || x > *xs.last().unwrap() {
                    return 0.0;
                }
                let idx = match xs.binary_search_by(|a| a.partial_cmp(&x).unwrap()) {
                    Ok(i) => return pdf[i],
                    Err(i) => i,
                };
                let (x0, x1) = (xs[idx - 1], xs[idx]);
                let t = (x - x0) / (x1 - x0);
                pdf[idx - 1] * (1.0 - t) + pdf[idx] * t
            }
            ObservedDensity::Kde(est) => est.eval(point),
        }
    }
}

/// Output of one weighted data-consistent update.
#[derive(Clone, Debug)]
pub struct DciResult {
    /// Weighted KDE of the QoI samples (the predicted density).
    pub predicted: DensityEstimate,
    /// Ratio observed/predicted at each sample.
    pub ratios: DVector<f64>,
    /// Weighted mean of the ratios; the validity diagnostic.
    pub expected_ratio: f64,
    /// Weighted mean of `r ln r`, clamped at zero.
    pub kl_dci: f64,
    /// The same statistic before clamping; estimator noise can push it
    /// slightly negative.
    pub kl_dci_raw: f64,
}

/// Weighted data-consistent update over a QoI sample cloud (rows of
/// `qoi_samples`), with `weights = None` meaning unit weights.
pub fn wdci(
    qoi_samples: &DMatrix<f64>,
    weights: Option<&DVector<f64>>,
    observed: &ObservedDensity,
) -> Result<DciResult> {
    let k = qoi_samples.nrows();
    let q = qoi_samples.ncols();
    if k < 10 {
        return Err(Error::InsufficientSamples {
            context: "data-consistent update",
            required: 10,
            got: k,
        });
    }
    observed.validate()?;
    if observed.dim() != q {
        return Err(Error::DimensionMismatch {
            context: "observed density dimension",
            expected: q,
            found: observed.dim(),
        });
    }
    if qoi_samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite QoI sample".into()));
    }

    let predicted = wkde_fit(qoi_samples, weights)?;
    let pred_at_samples = predicted.eval_batch(qoi_samples)?;

    let mut ratios = DVector::zeros(k);
    let mut underflow = Vec::new();
    for i in 0..k {
        let row: Vec<f64> = qoi_samples.row(i).iter().copied().collect();
        let obs = observed.eval(&row);
        let pred = pred_at_samples[i];
        if pred < PREDICTED_FLOOR {
            if obs > OBSERVED_MASS_FLOOR {
                underflow.push(i);
            } else {
                ratios[i] = 0.0;
            }
        } else {
            ratios[i] = obs / pred;
        }
    }
    if !underflow.is_empty() {
        return Err(Error::PredictedUnderflow { indices: underflow });
    }

    let w = predicted.weights();
    let w_sum = w.sum();
    let expected_ratio = (0..k).map(|i| w[i] * ratios[i]).sum::<f64>() / w_sum;
    // 0 * ln 0 is taken as 0.
    let kl_raw = (0..k)
        .map(|i| {
            let r = ratios[i];
            if r > 0.0 {
                w[i] * r * r.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / w_sum;

    Ok(DciResult {
        predicted,
        ratios,
        expected_ratio,
        kl_dci: kl_raw.max(0.0),
        kl_dci_raw: kl_raw,
    })
}
