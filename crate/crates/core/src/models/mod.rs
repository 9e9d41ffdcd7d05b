//! Built-in forward models and synthetic-truth generators.

pub mod heat;
pub mod kl;
pub mod linear;
pub mod seirs;
pub mod sensors;

pub use heat::{bilinear, heat_solve, heat_truth, HeatSimulator, HeatTruth, HeatWindowInit};
pub use kl::{kl_decompose, kl_realize, Grid2d, KlField};
pub use linear::LinearModel;
pub use seirs::{
    rk4_simulate, seirs_rhs, seirs_truth, SeirsParams, SeirsSimulator, SeirsTruth, ShiftSchedule,
    StateSeries, WindowInit,
};
pub use sensors::SensorSet;
