//! Experiment configuration: one JSON file fully determines an experiment
//! together with the seeds it embeds.
//!
//! Unset engine fields resolve to per-model defaults matching the bundled
//! experiment shapes, so `{"model": {"kind": "seirs"}, "output_dir": "run"}`
//! is a complete change-point study.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use dcseq::models::{SeirsParams, ShiftSchedule};
use dcseq::{DriftResponse, EngineConfig, InitialDensity, PcaCentering, Thresholds};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const BASE_RATES: [f64; 4] = [3.0 / 14.0, 1.0 / 7.0, 1.0 / 14.0, 1.0 / 365.0];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ensemble_size: Option<usize>,
    #[serde(default)]
    pub initial: Option<InitialSpec>,
    #[serde(default)]
    pub thresholds: Option<Thresholds>,
    #[serde(default)]
    pub drift_response: Option<DriftResponse>,
    #[serde(default)]
    pub reset: Option<InitialSpec>,
    #[serde(default)]
    pub pca_centering: Option<PcaCentering>,
    #[serde(default)]
    pub seeds: Seeds,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Measurement-noise stream for truth generation.
    pub truth_noise: u64,
    /// Ensemble draws and every stochastic control action.
    pub engine: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            truth_noise: 737,
            engine: 99,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Linear {
        /// Rows of the sensor matrix, one per measurement.
        sensor_matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
        lambda_true: Vec<f64>,
        #[serde(default = "default_linear_sigma")]
        sigma: f64,
        #[serde(default = "default_linear_windows")]
        windows: usize,
        /// Also write an ensemble store for offline re-weighting runs.
        #[serde(default)]
        store: bool,
    },
    Seirs {
        #[serde(default = "default_base_rates")]
        base_rates: [f64; 4],
        #[serde(default = "default_shifts")]
        shifts: Vec<ShiftSpec>,
        #[serde(default = "default_seirs_init")]
        init_state: [f64; 4],
        #[serde(default = "default_seirs_dt")]
        dt: f64,
        #[serde(default = "default_window_days")]
        window_days: usize,
        #[serde(default = "default_seirs_windows")]
        windows: usize,
        #[serde(default = "default_seirs_sigma")]
        sigma: f64,
    },
    Heat {
        #[serde(default = "default_grid_n")]
        grid_n: usize,
        #[serde(default = "default_domain")]
        domain: [f64; 2],
        #[serde(default = "default_modes")]
        modes: usize,
        #[serde(default)]
        mean_log: f64,
        #[serde(default = "default_marginal_std")]
        marginal_std: f64,
        #[serde(default = "default_correlation_length")]
        correlation_length: f64,
        /// Explicit truth coefficients; drawn standard normal from
        /// `coefficient_seed` when absent.
        #[serde(default)]
        coefficients: Option<Vec<f64>>,
        #[serde(default = "default_coefficient_seed")]
        coefficient_seed: u64,
        #[serde(default = "default_sensor_count")]
        sensor_count: usize,
        #[serde(default = "default_cadence")]
        cadence: f64,
        #[serde(default = "default_heat_sigma")]
        sigma: f64,
        #[serde(default = "default_sensor_seed")]
        sensor_seed: u64,
        #[serde(default = "default_heat_dt")]
        dt: f64,
        #[serde(default = "default_window_seconds")]
        window_seconds: f64,
        #[serde(default = "default_heat_windows")]
        windows: usize,
    },
    Offline {
        store_dir: PathBuf,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub day: f64,
    pub rates: [f64; 4],
}

fn default_linear_sigma() -> f64 {
    0.25
}
fn default_linear_windows() -> usize {
    5
}
fn default_base_rates() -> [f64; 4] {
    BASE_RATES
}
fn default_shifts() -> Vec<ShiftSpec> {
    vec![
        ShiftSpec {
            day: 25.0,
            rates: [0.5 / 14.0, BASE_RATES[1], BASE_RATES[2], BASE_RATES[3]],
        },
        ShiftSpec {
            day: 150.0,
            rates: [3.6 / 14.0, 1.0 / 3.5, BASE_RATES[2], BASE_RATES[3]],
        },
    ]
}
fn default_seirs_init() -> [f64; 4] {
    [0.98, 0.01, 0.01, 0.0]
}
fn default_seirs_dt() -> f64 {
    0.1
}
fn default_window_days() -> usize {
    14
}
fn default_seirs_windows() -> usize {
    26
}
fn default_seirs_sigma() -> f64 {
    0.005
}
fn default_grid_n() -> usize {
    64
}
fn default_domain() -> [f64; 2] {
    [-2.0, 2.0]
}
fn default_modes() -> usize {
    10
}
fn default_marginal_std() -> f64 {
    0.2
}
fn default_correlation_length() -> f64 {
    0.1
}
fn default_coefficient_seed() -> u64 {
    31
}
fn default_sensor_count() -> usize {
    500
}
fn default_cadence() -> f64 {
    0.05
}
fn default_heat_sigma() -> f64 {
    0.05
}
fn default_sensor_seed() -> u64 {
    313
}
fn default_heat_dt() -> f64 {
    0.0025
}
fn default_window_seconds() -> f64 {
    0.5
}
fn default_heat_windows() -> usize {
    6
}

/// Parameter-space density spec with plain vectors, kept separate from the
/// engine's type so config files stay hand-editable.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    UniformBox { lower: Vec<f64>, upper: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl InitialSpec {
    pub fn build(&self) -> InitialDensity {
        match self {
            InitialSpec::UniformBox { lower, upper } => InitialDensity::UniformBox {
                lower: DVector::from_vec(lower.clone()),
                upper: DVector::from_vec(upper.clone()),
            },
            InitialSpec::Gaussian { mean, std } => InitialDensity::Gaussian {
                mean: DVector::from_vec(mean.clone()),
                std: DVector::from_vec(std.clone()),
            },
        }
    }
}

/// A fully determined experiment: every optional field filled in.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Resolved {
    pub model: ModelSpec,
    pub output_dir: PathBuf,
    pub ensemble_size: usize,
    pub initial: InitialSpec,
    pub thresholds: Thresholds,
    pub drift_response: DriftResponse,
    pub reset: Option<InitialSpec>,
    pub pca_centering: PcaCentering,
    pub seeds: Seeds,
}

impl Resolved {
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            thresholds: self.thresholds,
            drift_response: self.drift_response,
            reset: self.reset.as_ref().map(|r| r.build()),
            pca_centering: self.pca_centering,
        }
    }

    pub fn param_dim(&self) -> usize {
        match &self.initial {
            InitialSpec::UniformBox { lower, .. } => lower.len(),
            InitialSpec::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn seirs_schedule(&self) -> Result<ShiftSchedule, CliError> {
        let ModelSpec::Seirs {
            base_rates, shifts, ..
        } = &self.model
        else {
            return Err(CliError::config("model: expected kind = seirs"));
        };
        let mut entries = vec![(0.0, seirs_params(base_rates)?)];
        for s in shifts {
            entries.push((s.day, seirs_params(&s.rates)?));
        }
        ShiftSchedule::new(entries).map_err(|e| CliError::config(format!("model.shifts: {e}")))
    }
}

fn seirs_params(rates: &[f64; 4]) -> Result<SeirsParams, CliError> {
    SeirsParams::from_rates(rates).map_err(|e| CliError::config(format!("model.base_rates: {e}")))
}

pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::config(format!("cannot open {}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_reader(BufReader::new(file));
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| CliError::config(format!("{}: {}", e.path(), e.inner())))
}

impl ExperimentConfig {
    /// Fill unset fields with per-model defaults and validate cross-field
    /// constraints.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let (k, initial, thresholds, drift, centering) = match &self.model {
            ModelSpec::Linear { lambda_true, .. } => {
                let p = lambda_true.len();
                if p == 0 {
                    return Err(CliError::config("model.lambda_true: must be nonempty"));
                }
                (
                    1000,
                    InitialSpec::Gaussian {
                        mean: vec![0.0; p],
                        std: vec![1.0; p],
                    },
                    Thresholds::default(),
                    DriftResponse::Reweight,
                    PcaCentering::Centered,
                )
            }
            ModelSpec::Seirs { base_rates, .. } => (
                1000,
                InitialSpec::UniformBox {
                    lower: vec![0.0; 4],
                    upper: base_rates.iter().map(|r| 2.0 * r).collect(),
                },
                Thresholds {
                    eps_pred: 0.1,
                    eps_kl: 3.0,
                    eps_samples: 1.0,
                    q_max: 3,
                    q_min: 1,
                    resample_increment: 0,
                    ..Thresholds::default()
                },
                DriftResponse::Resample,
                PcaCentering::Raw,
            ),
            ModelSpec::Heat { modes, .. } => (
                100,
                InitialSpec::Gaussian {
                    mean: vec![0.0; *modes],
                    std: vec![std::f64::consts::SQRT_2; *modes],
                },
                Thresholds {
                    eps_pred: 0.2,
                    eps_kl: 1e9,
                    eps_samples: 0.9,
                    q_max: 3,
                    q_min: 1,
                    resample_increment: 50,
                    max_control2: 3,
                    ..Thresholds::default()
                },
                DriftResponse::Resample,
                PcaCentering::Centered,
            ),
            ModelSpec::Offline { .. } => {
                let initial = self.initial.clone().ok_or_else(|| {
                    CliError::config("initial: required for offline runs (must match the store)")
                })?;
                (
                    1000,
                    initial,
                    Thresholds {
                        eps_samples: 0.0,
                        resample_increment: 0,
                        ..Thresholds::default()
                    },
                    DriftResponse::Reweight,
                    PcaCentering::Centered,
                )
            }
        };
        let resolved = Resolved {
            model: self.model.clone(),
            output_dir: self.output_dir.clone(),
            ensemble_size: self.ensemble_size.unwrap_or(k),
            initial: self.initial.clone().unwrap_or(initial),
            thresholds: self.thresholds.unwrap_or(thresholds),
            drift_response: self.drift_response.unwrap_or(drift),
            reset: self.reset.clone(),
            pca_centering: self.pca_centering.unwrap_or(centering),
            seeds: self.seeds,
        };
        resolved.validate()?;
        Ok(resolved)
    }
}

impl Resolved {
    fn validate(&self) -> Result<(), CliError> {
        let t = &self.thresholds;
        if !(t.eps_pred > 0.0) {
            return Err(CliError::config("thresholds.eps_pred: must be positive"));
        }
        if t.q_min == 0 || t.q_min > t.q_max {
            return Err(CliError::config(
                "thresholds.q_min: need 0 < q_min <= q_max",
            ));
        }
        if !(0.0..=1.0).contains(&t.eps_samples) {
            return Err(CliError::config(
                "thresholds.eps_samples: must lie in [0, 1]",
            ));
        }
        if self.ensemble_size < 10 {
            return Err(CliError::config("ensemble_size: need at least 10"));
        }
        match (&self.initial, self.param_dim()) {
            (InitialSpec::UniformBox { lower, upper }, p) => {
                if upper.len() != p || lower.iter().zip(upper).any(|(l, u)| l >= u) {
                    return Err(CliError::config(
                        "initial: box bounds must satisfy lower < upper per coordinate",
                    ));
                }
            }
            (InitialSpec::Gaussian { mean, std }, _) => {
                if std.len() != mean.len() || std.iter().any(|s| *s <= 0.0) {
                    return Err(CliError::config(
                        "initial: gaussian std must be positive, same length as mean",
                    ));
                }
            }
        }
        if let ModelSpec::Offline { .. } = self.model {
            // An offline run replays a fixed ensemble; anything that would
            // request fresh simulations cannot be served from the store.
            if self.thresholds.eps_samples != 0.0 {
                return Err(CliError::config(
                    "thresholds.eps_samples: offline runs require 0 (pure re-weighting)",
                ));
            }
            if self.thresholds.resample_increment != 0 {
                return Err(CliError::config(
                    "thresholds.resample_increment: offline runs require 0",
                ));
            }
            if !matches!(self.drift_response, DriftResponse::Reweight) {
                return Err(CliError::config(
                    "drift_response: offline runs require reweight",
                ));
            }
        }
        let expect_dim = match &self.model {
            ModelSpec::Linear { lambda_true, .. } => Some(lambda_true.len()),
            ModelSpec::Seirs { .. } => Some(4),
            ModelSpec::Heat { modes, .. } => Some(*modes),
            ModelSpec::Offline { .. } => None,
        };
        if let Some(p) = expect_dim {
            if self.param_dim() != p {
                return Err(CliError::config(format!(
                    "initial: dimension {} does not match the model's parameter count {p}",
                    self.param_dim()
                )));
            }
        }
        Ok(())
    }
}

pub fn write_resolved(resolved: &Resolved, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::runtime_io)?;
    let text = serde_json::to_string_pretty(resolved).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(dir.join("config.json"), text + "\n").map_err(CliError::runtime_io)
}

pub fn load_resolved(dir: &Path) -> Result<Resolved, CliError> {
    let path = dir.join("config.json");
    let file = File::open(&path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_reader(BufReader::new(file));
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| CliError::Runtime(format!("{}: {}", e.path(), e.inner())))
}
