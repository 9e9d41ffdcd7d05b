//! Sequential data-consistent parameter estimation for dynamical systems.
//!
//! The pipeline: simulate an ensemble of parameter samples through a forward
//! model, learn a low-dimensional quantity-of-interest map from the noise-
//! scaled residuals, push the ensemble through it, and re-weight by the
//! ratio of the observed density to the predicted density.  The maximal
//! updated density point is the highest-ratio sample.  A windowed engine
//! repeats this against streaming data, with diagnostics-driven retries and
//! change-point handling for parameter drift.

pub mod dci;
pub mod error;
pub mod io;
pub mod kde;
pub mod models;
pub mod qoi;
pub mod sequential;

pub use dci::{wdci, DciResult, ObservedDensity};
pub use error::{Error, Result};
pub use kde::{density_eval, wkde_fit, DensityEstimate};
pub use qoi::{
    apply_qpca, learn_qpca, linear_gaussian_mud, mud_estimate, residual_matrix,
    LinearGaussianProblem, MudSolution, PcaCentering, QoiMap, ResidualMatrix,
};
pub use sequential::{
    detect_change_point, effective_sample_fraction, sequential_mud, Attempt, CloudDensity,
    DataPacket, Decision, DriftResponse, EngineConfig, EngineSnapshot, InitialDensity,
    ParameterEnsemble, RngState, SequentialEngine, Simulator, Thresholds, WindowRecord,
};
