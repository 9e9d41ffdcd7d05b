//! Windowed sequential estimation with diagnostics-driven retries.
//!
//! Each incoming data window produces a candidate MUD solution.  Two
//! diagnostics gate acceptance: the mean ratio must sit within `eps_pred` of
//! one (the update is valid), and when it does not, the divergence statistic
//! separates approximation error from a change in the underlying truth.
//!
//! Retry controls, applied in order within a window:
//!
//! 1. drop a QoI component (`q` decremented toward `q_min`);
//! 2. add samples drawn from the current initial representation;
//! 3. re-weight the existing samples against a reset initial density;
//! 4. draw a fresh ensemble from the reset initial density.
//!
//! Controls 3 and 4 fire when the divergence also exceeds `eps_kl`, which
//! flags a change point.  On acceptance the weights are multiplied by the
//! ratios; if too few survive (effective fraction at or below `eps_samples`)
//! the updated cloud is rebuilt as a weighted KDE and resampled.

use nalgebra::{DMatrix, DVector};
use rand::distributions::WeightedIndex;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{scott_bandwidths, wkde_fit_with_bandwidths, DensityEstimate};
use crate::qoi::{mud_estimate_with, MudSolution, PcaCentering};

/// A weighted parameter sample cloud.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParameterEnsemble {
    /// `k x p`, one row per sample.
    pub samples: DMatrix<f64>,
    /// Nonnegative, not all zero.
    pub weights: DVector<f64>,
    /// Incremented every time the cloud is redrawn.
    pub generation: u32,
    /// Seed that produced the original cloud; bookkeeping only.
    pub rng_seed: u64,
}

impl ParameterEnsemble {
    pub fn new(
        samples: DMatrix<f64>,
        weights: DVector<f64>,
        generation: u32,
        rng_seed: u64,
    ) -> Result<Self> {
        if samples.nrows() < 10 {
            return Err(Error::InsufficientSamples {
                context: "parameter ensemble",
                required: 10,
                got: samples.nrows(),
            });
        }
        if weights.len() != samples.nrows() {
            return Err(Error::DimensionMismatch {
                context: "ensemble weight length",
                expected: samples.nrows(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights {
                reason: "ensemble weights must be finite and nonnegative".into(),
            });
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::WeightCollapse);
        }
        Ok(Self {
            samples,
            weights,
            generation,
            rng_seed,
        })
    }

    pub fn size(&self) -> usize {
        self.samples.nrows()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }
}

/// One window of observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPacket {
    pub window_index: usize,
    /// Nondecreasing measurement times (simultaneous sensors share a time).
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub sensor_ids: Vec<String>,
}

impl DataPacket {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.values.len();
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "packet {} has no measurements",
                self.window_index
            )));
        }
        for (name, len) in [
            ("times", self.times.len()),
            ("sigmas", self.sigmas.len()),
            ("sensor_ids", self.sensor_ids.len()),
        ] {
            if len != n {
                return Err(Error::InvalidArgument(format!(
                    "packet {}: field {name} has length {len}, expected {n}",
                    self.window_index
                )));
            }
        }
        for (j, s) in self.sigmas.iter().enumerate() {
            if !s.is_finite() || *s <= 0.0 {
                return Err(Error::InvalidNoiseModel {
                    index: j,
                    sigma: *s,
                });
            }
        }
        for (j, t) in self.times.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "packet {}: times[{j}] is not finite",
                    self.window_index
                )));
            }
        }
        if self.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(format!(
                "packet {}: times must be nondecreasing",
                self.window_index
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "packet {}: non-finite value",
                self.window_index
            )));
        }
        Ok(())
    }
}

/// Diagnostic thresholds and retry policy.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Thresholds {
    /// Acceptance band half-width around mean ratio one.
    pub eps_pred: f64,
    /// Divergence level separating approximation error from a change point.
    pub eps_kl: f64,
    /// Effective-sample fraction at or below which acceptance resamples.
    pub eps_samples: f64,
    /// Normalized weights at or below this count as dead.
    pub eps_mach: f64,
    pub q_max: usize,
    pub q_min: usize,
    /// Samples added per Control-2 retry.
    pub resample_increment: usize,
    /// Control-2 retries allowed per window.
    pub max_control2: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            eps_pred: 0.2,
            eps_kl: 3.0,
            eps_samples: 0.5,
            eps_mach: 1e-16,
            q_max: 2,
            q_min: 1,
            resample_increment: 0,
            max_control2: 3,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_pred > 0.0 && self.eps_pred.is_finite()) {
            return Err(Error::InvalidArgument("eps_pred must be positive".into()));
        }
        if !(self.eps_kl > 0.0) {
            return Err(Error::InvalidArgument("eps_kl must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eps_samples) {
            return Err(Error::InvalidArgument(
                "eps_samples must lie in [0, 1]".into(),
            ));
        }
        if !(self.eps_mach > 0.0 && self.eps_mach < 1.0) {
            return Err(Error::InvalidArgument(
                "eps_mach must lie in (0, 1)".into(),
            ));
        }
        if self.q_min == 0 || self.q_min > self.q_max {
            return Err(Error::InvalidArgument(
                "need 1 <= q_min <= q_max".into(),
            ));
        }
        Ok(())
    }
}

/// Terminal window decisions and retry actions share one vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    AcceptedReweight,
    AcceptedResample,
    Control1,
    Control2,
    Control3,
    Control4,
    Skipped,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Decision::AcceptedReweight => "Accepted-Reweight",
            Decision::AcceptedResample => "Accepted-Resample",
            Decision::Control1 => "Control1",
            Decision::Control2 => "Control2",
            Decision::Control3 => "Control3",
            Decision::Control4 => "Control4",
            Decision::Skipped => "Skipped",
        };
        f.write_str(s)
    }
}

/// One candidate evaluation inside a window, with the action it triggered.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Attempt {
    pub q: usize,
    pub expected_ratio: f64,
    pub kl_dci: f64,
    pub action: Decision,
}

/// Terminal outcome of one window.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window_index: usize,
    pub q_used: usize,
    pub decision: Decision,
    pub mud_point: Vec<f64>,
    pub expected_ratio: f64,
    pub kl_dci: f64,
    pub eff_fraction: f64,
    pub change_point_flag: bool,
    /// Divergence of the post-update weights from the pre-update weights on
    /// the shared sample cloud (the successive-update information gain).
    pub kl_successive: f64,
    /// Retry actions in the order taken.
    pub attempts: Vec<Attempt>,
}

/// Response applied when a change point is flagged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftResponse {
    /// Control 3: re-weight existing samples against the reset density.
    Reweight,
    /// Control 4: draw a fresh ensemble from the reset density.
    Resample,
}

/// An initial density that can be evaluated and sampled.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDensity {
    UniformBox {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    /// Independent Gaussian per dimension.
    Gaussian {
        mean: DVector<f64>,
        std: DVector<f64>,
    },
    /// An explicit weighted-KDE representation (rebuilt initials).
    Kde(DensityEstimate),
    /// A weighted mixture sharing one full-covariance Gaussian kernel
    /// (rebuilt initials that must keep cross-parameter correlation).
    CloudKde(CloudDensity),
}

/// Weighted Gaussian mixture with a shared full-covariance kernel.  Product
/// kernels lose the cross-parameter correlation an update just learned; the
/// shared factor keeps the redrawn cloud's second moments intact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CloudDensity {
    /// `k x p` kernel centers.
    pub centers: DMatrix<f64>,
    pub weights: DVector<f64>,
    /// Lower Cholesky factor of the shared kernel covariance.
    pub factor: DMatrix<f64>,
}

impl CloudDensity {
    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        let p = self.dim();
        let x = DVector::from_row_slice(point);
        let mut acc = 0.0;
        for i in 0..self.centers.nrows() {
            let d = &x - self.centers.row(i).transpose();
            let z = self
                .factor
                .solve_lower_triangular(&d)
                .expect("kernel factor is nonsingular by construction");
            acc += self.weights[i] * (-0.5 * z.norm_squared()).exp();
        }
        let log_det: f64 = (0..p).map(|j| self.factor[(j, j)].ln()).sum();
        let log_norm = -(p as f64) * 0.9189385332046727 - log_det; // ln sqrt(2 pi)
        acc * log_norm.exp() / self.weights.sum()
    }

    pub fn sample_matrix<R: Rng>(&self, rng: &mut R, count: usize) -> Result<DMatrix<f64>> {
        let index = WeightedIndex::new(self.weights.iter().copied()).map_err(|e| {
            Error::InvalidWeights {
                reason: format!("cannot sample from mixture: {e}"),
            }
        })?;
        let p = self.dim();
        let mut out = DMatrix::zeros(count, p);
        let mut xi = DVector::zeros(p);
        for r in 0..count {
            let i = index.sample(rng);
            for j in 0..p {
                xi[j] = StandardNormal.sample(rng);
            }
            let noise = &self.factor * &xi;
            for j in 0..p {
                out[(r, j)] = self.centers[(i, j)] + noise[j];
            }
        }
        Ok(out)
    }
}

impl InitialDensity {
    pub fn dim(&self) -> usize {
        match self {
            InitialDensity::UniformBox { lower, .. } => lower.len(),
            InitialDensity::Gaussian { mean, .. } => mean.len(),
            InitialDensity::Kde(est) => est.dim(),
            InitialDensity::CloudKde(est) => est.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InitialDensity::UniformBox { lower, upper } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(Error::InvalidArgument(
                        "uniform box bounds must be nonempty and matched".into(),
                    ));
                }
                for j in 0..lower.len() {
                    if !(lower[j] < upper[j]) {
                        return Err(Error::InvalidArgument(format!(
                            "uniform box dimension {j} has empty interior"
                        )));
                    }
                }
            }
            InitialDensity::Gaussian { mean, std } => {
                if mean.len() != std.len() || mean.is_empty() {
                    return Err(Error::InvalidArgument(
                        "gaussian mean/std must be nonempty and matched".into(),
                    ));
                }
                if std.iter().any(|s| !s.is_finite() || *s <= 0.0) {
                    return Err(Error::InvalidArgument(
                        "gaussian std must be positive".into(),
                    ));
                }
            }
            InitialDensity::Kde(_) | InitialDensity::CloudKde(_) => {}
        }
        Ok(())
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        match self {
            InitialDensity::UniformBox { lower, upper } => {
                let mut vol = 1.0;
                for j in 0..lower.len() {
                    if point[j] < lower[j] || point[j] > upper[j] {
                        return 0.0;
                    }
                    vol *= upper[j] - lower[j];
                }
                1.0 / vol
            }
            InitialDensity::Gaussian { mean, std } => {
                let mut log_p = 0.0;
                for j in 0..mean.len() {
                    let z = (point[j] - mean[j]) / std[j];
                    log_p += -0.5 * z * z - std[j].ln() - 0.9189385332046727; // ln sqrt(2 pi)
                }
                log_p.exp()
            }
            InitialDensity::Kde(est) => est.eval(point),
            InitialDensity::CloudKde(est) => est.eval(point),
        }
    }

    pub fn sample_matrix<R: Rng>(&self, rng: &mut R, count: usize) -> Result<DMatrix<f64>> {
        match self {
            InitialDensity::UniformBox { lower, upper } => {
                let p = lower.len();
                let mut out = DMatrix::zeros(count, p);
                for i in 0..count {
                    for j in 0..p {
                        out[(i, j)] = rng.gen_range(lower[j]..upper[j]);
                    }
                }
                Ok(out)
            }
            InitialDensity::Gaussian { mean, std } => {
                let p = mean.len();
                let mut out = DMatrix::zeros(count, p);
                for i in 0..count {
                    for j in 0..p {
                        let z: f64 = StandardNormal.sample(rng);
                        out[(i, j)] = mean[j] + std[j] * z;
                    }
                }
                Ok(out)
            }
            InitialDensity::Kde(est) => est.sample_matrix(rng, count),
            InitialDensity::CloudKde(est) => est.sample_matrix(rng, count),
        }
    }
}

/// Forward model interface: noiseless simulated measurements for every
/// ensemble row at the packet's sensors and times, shape `k x n`.
pub trait Simulator {
    fn simulate(&self, samples: &DMatrix<f64>, packet: &DataPacket) -> Result<DMatrix<f64>>;
}

/// Fraction of weights that survive normalization above `eps_mach`.
pub fn effective_sample_fraction(weights: &DVector<f64>, eps_mach: f64) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("empty weight vector".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidWeights {
            reason: "weights must be finite and nonnegative".into(),
        });
    }
    let total = weights.sum();
    if total == 0.0 {
        return Err(Error::WeightCollapse);
    }
    let alive = weights.iter().filter(|w| **w / total > eps_mach).count();
    Ok(alive as f64 / weights.len() as f64)
}

/// Change-point rule on a terminal record: the validity diagnostic failed
/// while the divergence exceeded its threshold.
pub fn detect_change_point(record: &WindowRecord, thresholds: &Thresholds) -> bool {
    (record.expected_ratio - 1.0).abs() >= thresholds.eps_pred
        && record.kl_dci > thresholds.eps_kl
}

/// Engine policy: thresholds, drift response, and the reset density used by
/// Controls 3 and 4 (`None` means the original initial density).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EngineConfig {
    pub thresholds: Thresholds,
    pub drift_response: DriftResponse,
    pub reset: Option<InitialDensity>,
    pub pca_centering: PcaCentering,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            drift_response: DriftResponse::Resample,
            reset: None,
            pca_centering: PcaCentering::Centered,
        }
    }
}

/// Serializable snapshot of the engine's evolving state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub ensemble: ParameterEnsemble,
    pub sampling_density: InitialDensity,
    pub rng: RngState,
    pub last_window: Option<usize>,
}

/// Exact state of the engine's ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: [u64; 2],
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: [(pos >> 64) as u64, pos as u64],
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = ((self.word_pos[0] as u128) << 64) | self.word_pos[1] as u128;
        rng.set_word_pos(pos);
        rng
    }
}

/// The sequential estimation engine.
pub struct SequentialEngine<S: Simulator> {
    config: EngineConfig,
    simulator: S,
    initial: InitialDensity,
    ensemble: ParameterEnsemble,
    /// Density the current samples were drawn from; Control 2 draws more
    /// from here while weights stay uniform.
    sampling_density: InitialDensity,
    rng: ChaCha8Rng,
    last_window: Option<usize>,
}

enum Outcome {
    Accepted { solution: MudSolution, q: usize },
    Failed { solution: Option<MudSolution>, q: usize },
}

impl<S: Simulator> SequentialEngine<S> {
    /// Draw a generation-zero ensemble of `k` samples and start the stream.
    pub fn new(
        config: EngineConfig,
        simulator: S,
        initial: InitialDensity,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        config.thresholds.validate()?;
        initial.validate()?;
        if let Some(reset) = &config.reset {
            reset.validate()?;
            if reset.dim() != initial.dim() {
                return Err(Error::DimensionMismatch {
                    context: "reset density dimension",
                    expected: initial.dim(),
                    found: reset.dim(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = initial.sample_matrix(&mut rng, k)?;
        let weights = DVector::from_element(k, 1.0);
        let ensemble = ParameterEnsemble::new(samples, weights, 0, seed)?;
        Ok(Self {
            config,
            simulator,
            initial: initial.clone(),
            ensemble,
            sampling_density: initial,
            rng,
            last_window: None,
        })
    }

    /// Rebuild an engine from a snapshot; the original initial density must
    /// be supplied by the caller (it is part of the experiment, not the
    /// state).
    pub fn restore(
        config: EngineConfig,
        simulator: S,
        initial: InitialDensity,
        snapshot: EngineSnapshot,
    ) -> Result<Self> {
        config.thresholds.validate()?;
        initial.validate()?;
        if snapshot.ensemble.dim() != initial.dim() {
            return Err(Error::DimensionMismatch {
                context: "snapshot ensemble dimension",
                expected: initial.dim(),
                found: snapshot.ensemble.dim(),
            });
        }
        Ok(Self {
            config,
            simulator,
            initial,
            ensemble: snapshot.ensemble,
            sampling_density: snapshot.sampling_density,
            rng: snapshot.rng.restore(),
            last_window: snapshot.last_window,
        })
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        EngineSnapshot {
            ensemble: self.ensemble.clone(),
            sampling_density: self.sampling_density.clone(),
            rng: RngState::capture(&self.rng),
            last_window: self.last_window,
        }
    }

    pub fn ensemble(&self) -> &ParameterEnsemble {
        &self.ensemble
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn last_window(&self) -> Option<usize> {
        self.last_window
    }

    fn reset_density(&self) -> InitialDensity {
        self.config
            .reset
            .clone()
            .unwrap_or_else(|| self.initial.clone())
    }

    /// Density to draw Control-2 increments from: the sampling density while
    /// weights are uniform, otherwise a weighted-KDE rebuild of the cloud.
    fn augmentation_source(&self, work: &ParameterEnsemble) -> Result<InitialDensity> {
        let w = &work.weights;
        let uniform = w.max() == w.min();
        if uniform {
            Ok(self.sampling_density.clone())
        } else {
            shrunken_update_density(&work.samples, w)
        }
    }

    /// Process one window.  On any terminal outcome the record is returned;
    /// the ensemble only changes when the window is accepted.
    pub fn run_window(&mut self, packet: &DataPacket) -> Result<WindowRecord> {
        packet.validate()?;
        if let Some(last) = self.last_window {
            if packet.window_index <= last {
                return Err(Error::ProtocolViolation {
                    details: format!(
                        "window {} arrived after window {last}",
                        packet.window_index
                    ),
                });
            }
        }
        let thr = self.config.thresholds;
        let drift_action = match self.config.drift_response {
            DriftResponse::Reweight => Decision::Control3,
            DriftResponse::Resample => Decision::Control4,
        };

        // Working copies; committed only on acceptance.
        let mut work = self.ensemble.clone();
        let mut sampling = self.sampling_density.clone();
        let mut rng = self.rng.clone();
        let mut sim = self.simulate_checked(&work.samples, packet)?;

        let mut q = thr.q_max;
        let mut attempts: Vec<Attempt> = Vec::new();
        let mut change_flag = false;
        let mut drift_used = false;
        let mut control2_used = 0usize;

        let outcome = loop {
            let candidate = mud_estimate_with(
                &packet.values,
                &packet.sigmas,
                &work,
                &sim,
                q,
                self.config.pca_centering,
            );
            match candidate {
                Ok(solution) => {
                    let e = solution.dci.expected_ratio;
                    let kl = solution.dci.kl_dci;
                    if (e - 1.0).abs() < thr.eps_pred {
                        break Outcome::Accepted { solution, q };
                    }
                    if kl <= thr.eps_kl {
                        // Approximation error: shrink the map, then add samples.
                        if q > thr.q_min {
                            attempts.push(Attempt {
                                q,
                                expected_ratio: e,
                                kl_dci: kl,
                                action: Decision::Control1,
                            });
                            q -= 1;
                            continue;
                        }
                        if control2_used < thr.max_control2 && thr.resample_increment > 0 {
                            attempts.push(Attempt {
                                q,
                                expected_ratio: e,
                                kl_dci: kl,
                                action: Decision::Control2,
                            });
                            match self.augment(&mut work, &mut sim, packet, &mut rng) {
                                Ok(()) => {
                                    control2_used += 1;
                                    q = thr.q_max;
                                    continue;
                                }
                                Err(_) => break Outcome::Failed {
                                    solution: Some(solution),
                                    q,
                                },
                            }
                        }
                        break Outcome::Failed {
                            solution: Some(solution),
                            q,
                        };
                    }
                    // Divergence past threshold: change point.
                    change_flag = true;
                    attempts.push(Attempt {
                        q,
                        expected_ratio: e,
                        kl_dci: kl,
                        action: drift_action,
                    });
                    if drift_used
                        || !self.apply_drift_response(&mut work, &mut sampling, &mut sim, packet, &mut rng)?
                    {
                        break Outcome::Failed {
                            solution: Some(solution),
                            q,
                        };
                    }
                    drift_used = true;
                    q = thr.q_max;
                    control2_used = 0;
                }
                Err(Error::RankDeficient { .. }) => {
                    if q > thr.q_min {
                        attempts.push(Attempt {
                            q,
                            expected_ratio: f64::NAN,
                            kl_dci: f64::NAN,
                            action: Decision::Control1,
                        });
                        q -= 1;
                        continue;
                    }
                    break Outcome::Failed { solution: None, q };
                }
                Err(Error::PredictedUnderflow { .. }) => {
                    // Observed mass where the predicted density has none is a
                    // certain validity violation; treat as unbounded
                    // divergence and take the drift branch.
                    change_flag = true;
                    attempts.push(Attempt {
                        q,
                        expected_ratio: f64::NAN,
                        kl_dci: f64::INFINITY,
                        action: drift_action,
                    });
                    if drift_used
                        || !self.apply_drift_response(&mut work, &mut sampling, &mut sim, packet, &mut rng)?
                    {
                        break Outcome::Failed { solution: None, q };
                    }
                    drift_used = true;
                    q = thr.q_max;
                    control2_used = 0;
                }
                Err(e) => return Err(e),
            }
        };

        let record = match outcome {
            Outcome::Accepted { solution, q } => {
                let new_weights = work.weights.component_mul(&solution.dci.ratios);
                if new_weights.iter().all(|w| *w == 0.0) {
                    return Err(Error::WeightCollapse);
                }
                let eff = effective_sample_fraction(&new_weights, thr.eps_mach)?;
                let kl_successive = discrete_kl(&new_weights, &work.weights);
                let decision = if eff <= thr.eps_samples {
                    // Rebuild the updated density and redraw the cloud.
                    let rebuilt = shrunken_update_density(&work.samples, &new_weights)?;
                    let k = work.size();
                    let fresh = rebuilt.sample_matrix(&mut rng, k)?;
                    sampling = rebuilt;
                    work.samples = fresh;
                    work.weights = DVector::from_element(k, 1.0);
                    work.generation += 1;
                    Decision::AcceptedResample
                } else {
                    // Keep coordinates; carry normalized products forward.
                    let mean = new_weights.sum() / new_weights.len() as f64;
                    work.weights = new_weights / mean;
                    Decision::AcceptedReweight
                };
                self.ensemble = work;
                self.sampling_density = sampling;
                WindowRecord {
                    window_index: packet.window_index,
                    q_used: q,
                    decision,
                    mud_point: solution.mud_point.iter().copied().collect(),
                    expected_ratio: solution.dci.expected_ratio,
                    kl_dci: solution.dci.kl_dci,
                    eff_fraction: eff,
                    change_point_flag: change_flag,
                    kl_successive,
                    attempts,
                }
            }
            Outcome::Failed { solution, q } => {
                // Window skipped; the committed ensemble is untouched.
                let eff =
                    effective_sample_fraction(&self.ensemble.weights, thr.eps_mach)?;
                let p = self.ensemble.dim();
                let (mud, e, kl) = match solution {
                    Some(sol) => (
                        sol.mud_point.iter().copied().collect(),
                        sol.dci.expected_ratio,
                        sol.dci.kl_dci,
                    ),
                    None => (vec![f64::NAN; p], f64::NAN, f64::NAN),
                };
                WindowRecord {
                    window_index: packet.window_index,
                    q_used: q,
                    decision: Decision::Skipped,
                    mud_point: mud,
                    expected_ratio: e,
                    kl_dci: kl,
                    eff_fraction: eff,
                    change_point_flag: change_flag,
                    kl_successive: f64::NAN,
                    attempts,
                }
            }
        };
        self.rng = rng;
        self.last_window = Some(packet.window_index);
        Ok(record)
    }

    /// Consume a packet stream, processing windows in order.
    pub fn run_stream<I>(&mut self, packets: I) -> Result<Vec<WindowRecord>>
    where
        I: IntoIterator<Item = Result<DataPacket>>,
    {
        let mut records = Vec::new();
        for packet in packets {
            records.push(self.run_window(&packet?)?);
        }
        Ok(records)
    }

    fn simulate_checked(
        &self,
        samples: &DMatrix<f64>,
        packet: &DataPacket,
    ) -> Result<DMatrix<f64>> {
        let sim = self.simulator.simulate(samples, packet)?;
        if sim.nrows() != samples.nrows() || sim.ncols() != packet.len() {
            return Err(Error::DimensionMismatch {
                context: "simulated measurement matrix",
                expected: samples.nrows() * packet.len(),
                found: sim.nrows() * sim.ncols(),
            });
        }
        Ok(sim)
    }

    /// Control 2: extend the cloud with fresh draws and their simulations.
    /// Existing weights are normalized to mean one so the unit-weight
    /// newcomers are on the same scale.
    fn augment(
        &self,
        work: &mut ParameterEnsemble,
        sim: &mut DMatrix<f64>,
        packet: &DataPacket,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let source = self.augmentation_source(work)?;
        let add = source.sample_matrix(rng, self.config.thresholds.resample_increment)?;
        let add_sim = self.simulate_checked(&add, packet)?;

        let k_old = work.size();
        let k_new = k_old + add.nrows();
        let mean = work.weights.sum() / k_old as f64;

        let mut samples = DMatrix::zeros(k_new, work.dim());
        let mut weights = DVector::from_element(k_new, 1.0);
        let mut stacked_sim = DMatrix::zeros(k_new, packet.len());
        for i in 0..k_old {
            samples.set_row(i, &work.samples.row(i));
            weights[i] = work.weights[i] / mean;
            stacked_sim.set_row(i, &sim.row(i));
        }
        for i in 0..add.nrows() {
            samples.set_row(k_old + i, &add.row(i));
            stacked_sim.set_row(k_old + i, &add_sim.row(i));
        }
        work.samples = samples;
        work.weights = weights;
        *sim = stacked_sim;
        Ok(())
    }

    /// Controls 3 and 4.  Returns false when re-weighting against the reset
    /// density kills every sample, in which case the window fails.
    fn apply_drift_response(
        &self,
        work: &mut ParameterEnsemble,
        sampling: &mut InitialDensity,
        sim: &mut DMatrix<f64>,
        packet: &DataPacket,
        rng: &mut ChaCha8Rng,
    ) -> Result<bool> {
        let reset = self.reset_density();
        match self.config.drift_response {
            DriftResponse::Reweight => {
                let mut weights = DVector::zeros(work.size());
                for i in 0..work.size() {
                    let row: Vec<f64> = work.samples.row(i).iter().copied().collect();
                    weights[i] = reset.eval(&row);
                }
                if weights.iter().all(|w| *w == 0.0) {
                    return Ok(false);
                }
                work.weights = weights;
            }
            DriftResponse::Resample => {
                let k = work.size();
                work.samples = reset.sample_matrix(rng, k)?;
                work.weights = DVector::from_element(k, 1.0);
                work.generation += 1;
                *sampling = reset;
                *sim = self.simulate_checked(&work.samples, packet)?;
            }
        }
        Ok(true)
    }
}

/// Mixture rebuild of an updated cloud that preserves its weighted mean and
/// covariance: support points are pulled toward the weighted mean by
/// `a = sqrt(1 - f^2)` with `f` the Scott factor, and the shared kernel
/// carries `f^2` times the weighted covariance, so redrawn second moments
/// match the update's exactly.  Redrawing from a plain product-kernel fit
/// would instead inflate every variance by `1 + f^2` and damp correlations
/// by `1 - f^2` per resample; at small ensembles in high dimension
/// (`f ~ 0.7` for `k = 100`, `p = 10`) that swamps the contraction the
/// update just bought.  Falls back to shrunken product kernels when the
/// covariance is numerically singular.
fn shrunken_update_density(
    samples: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> Result<InitialDensity> {
    let h = scott_bandwidths(samples, Some(weights))?;
    let v1: f64 = weights.sum();
    let v2: f64 = weights.iter().map(|x| x * x).sum();
    let k_eff = v1 * v1 / v2;
    let k = samples.nrows();
    let p = samples.ncols();
    let f = k_eff.powf(-1.0 / (p as f64 + 4.0));
    let a = (1.0 - f * f).max(0.0).sqrt();
    let mut mean = DVector::zeros(p);
    for j in 0..p {
        mean[j] = (0..k).map(|i| weights[i] * samples[(i, j)]).sum::<f64>() / v1;
    }
    let mut centers = samples.clone();
    for j in 0..p {
        for i in 0..k {
            centers[(i, j)] = mean[j] + a * (samples[(i, j)] - mean[j]);
        }
    }
    let denom = v1 - v2 / v1;
    let mut sigma = DMatrix::zeros(p, p);
    for i in 0..k {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for r in 0..p {
            let dr = samples[(i, r)] - mean[r];
            for c in r..p {
                sigma[(r, c)] += w * dr * (samples[(i, c)] - mean[c]);
            }
        }
    }
    for r in 0..p {
        for c in r..p {
            sigma[(r, c)] /= denom;
            sigma[(c, r)] = sigma[(r, c)];
        }
    }
    match nalgebra::Cholesky::new(sigma) {
        Some(chol) => Ok(InitialDensity::CloudKde(CloudDensity {
            centers,
            weights: weights.clone(),
            factor: chol.l() * f,
        })),
        None => Ok(InitialDensity::Kde(wkde_fit_with_bandwidths(
            &centers,
            Some(weights),
            &h,
        )?)),
    }
}

/// Divergence of normalized `new` from normalized `old` over the shared
/// sample cloud; terms with `new = 0` contribute zero.
fn discrete_kl(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    let sn = new.sum();
    let so = old.sum();
    if sn <= 0.0 || so <= 0.0 {
        return f64::NAN;
    }
    let mut acc = 0.0;
    for i in 0..new.len() {
        let p = new[i] / sn;
        if p > 0.0 {
            let q = old[i] / so;
            acc += p * (p / q).ln();
        }
    }
    acc
}

/// Run a whole packet stream from a fresh generation-zero ensemble.
pub fn sequential_mud<S, I>(
    config: EngineConfig,
    simulator: S,
    initial: InitialDensity,
    k: usize,
    seed: u64,
    packets: I,
) -> Result<(Vec<WindowRecord>, ParameterEnsemble)>
where
    S: Simulator,
    I: IntoIterator<Item = Result<DataPacket>>,
{
    let mut engine = SequentialEngine::new(config, simulator, initial, k, seed)?;
    let records = engine.run_stream(packets)?;
    Ok((records, engine.ensemble().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_fraction_counts_survivors() {
        let w = DVector::from_vec(vec![1.0, 1e-20, 1e-20, 1e-20]);
        let eff = effective_sample_fraction(&w, 1e-16).unwrap();
        assert_eq!(eff, 0.25);
    }

    #[test]
    fn effective_fraction_uniform_is_one() {
        let w = DVector::from_element(8, 3.0);
        assert_eq!(effective_sample_fraction(&w, 1e-16).unwrap(), 1.0);
    }

    #[test]
    fn effective_fraction_all_zero_is_collapse() {
        let w = DVector::from_element(4, 0.0);
        assert!(matches!(
            effective_sample_fraction(&w, 1e-16),
            Err(Error::WeightCollapse)
        ));
    }

    fn record_with(e: f64, kl: f64) -> WindowRecord {
        WindowRecord {
            window_index: 1,
            q_used: 1,
            decision: Decision::AcceptedReweight,
            mud_point: vec![0.0],
            expected_ratio: e,
            kl_dci: kl,
            eff_fraction: 1.0,
            change_point_flag: false,
            kl_successive: 0.0,
            attempts: vec![],
        }
    }

    #[test]
    fn change_point_requires_both_conditions() {
        let thr = Thresholds {
            eps_pred: 0.1,
            eps_kl: 3.0,
            ..Thresholds::default()
        };
        assert!(detect_change_point(&record_with(0.5, 5.0), &thr));
        assert!(!detect_change_point(&record_with(0.95, 5.0), &thr));
        assert!(!detect_change_point(&record_with(0.5, 1.0), &thr));
        assert!(!detect_change_point(&record_with(f64::NAN, 5.0), &thr));
    }

    #[test]
    fn rng_state_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let _: f64 = rng.gen();
        let _: f64 = rng.gen();
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        for _ in 0..32 {
            let a: u64 = rng.gen();
            let b: u64 = restored.gen();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn uniform_box_density_and_sampling() {
        let density = InitialDensity::UniformBox {
            lower: DVector::from_vec(vec![0.0, -1.0]),
            upper: DVector::from_vec(vec![2.0, 1.0]),
        };
        density.validate().unwrap();
        assert_eq!(density.eval(&[1.0, 0.0]), 0.25);
        assert_eq!(density.eval(&[3.0, 0.0]), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = density.sample_matrix(&mut rng, 200).unwrap();
        for i in 0..200 {
            assert!((0.0..=2.0).contains(&draws[(i, 0)]));
            assert!((-1.0..=1.0).contains(&draws[(i, 1)]));
        }
    }

    #[test]
    fn gaussian_density_matches_closed_form() {
        let density = InitialDensity::Gaussian {
            mean: DVector::from_vec(vec![1.0]),
            std: DVector::from_vec(vec![2.0]),
        };
        let expected = (-0.5f64 * 0.25).exp() / (2.0 * (2.0 * std::f64::consts::PI).sqrt());
        let got = density.eval(&[2.0]);
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn ensemble_validation() {
        let samples = DMatrix::zeros(5, 2);
        let weights = DVector::from_element(5, 1.0);
        assert!(matches!(
            ParameterEnsemble::new(samples, weights, 0, 0),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn packet_validation_names_bad_sigma() {
        let packet = DataPacket {
            window_index: 1,
            times: vec![1.0, 2.0],
            values: vec![0.1, 0.2],
            sigmas: vec![0.1, -0.5],
            sensor_ids: vec!["a".into(), "b".into()],
        };
        match packet.validate() {
            Err(Error::InvalidNoiseModel { index, sigma }) => {
                assert_eq!(index, 1);
                assert_eq!(sigma, -0.5);
            }
            other => panic!("expected InvalidNoiseModel, got {other:?}"),
        }
    }

    #[test]
    fn discrete_kl_zero_for_identical_weights() {
        let w = DVector::from_vec(vec![0.2, 0.5, 0.3]);
        assert_eq!(discrete_kl(&w, &w), 0.0);
    }
}
