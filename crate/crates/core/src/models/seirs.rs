//! SEIRS compartment dynamics with scheduled parameter shifts.
//!
//! States are population fractions (S, E, I, R); with zero birth rate the
//! four right-hand sides cancel pairwise so S+E+I+R is conserved.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequential::{DataPacket, Simulator};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeirsParams {
    /// lambda_1 (1/day): S -> E contact rate, scaled by I/N.
    pub infection_rate: f64,
    /// lambda_2 (1/day): E -> I.
    pub incubation_rate: f64,
    /// lambda_3 (1/day): I -> R.
    pub recovery_rate: f64,
    /// lambda_4 (1/day): R -> S.
    pub immunity_loss_rate: f64,
    /// mu (1/day): birth term; zero in every experiment here.
    pub birth_rate: f64,
}

impl SeirsParams {
    pub fn new(
        infection_rate: f64,
        incubation_rate: f64,
        recovery_rate: f64,
        immunity_loss_rate: f64,
    ) -> Self {
        Self {
            infection_rate,
            incubation_rate,
            recovery_rate,
            immunity_loss_rate,
            birth_rate: 0.0,
        }
    }

    pub fn from_rates(rates: &[f64]) -> Result<Self> {
        if rates.len() != 4 {
            return Err(Error::DimensionMismatch {
                context: "seirs rate vector",
                expected: 4,
                found: rates.len(),
            });
        }
        Ok(Self::new(rates[0], rates[1], rates[2], rates[3]))
    }

    pub fn rates(&self) -> [f64; 4] {
        [
            self.infection_rate,
            self.incubation_rate,
            self.recovery_rate,
            self.immunity_loss_rate,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.infection_rate,
            self.incubation_rate,
            self.recovery_rate,
            self.immunity_loss_rate,
            self.birth_rate,
        ];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidArgument(
                "SEIRS rates must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

pub fn seirs_rhs(state: &[f64; 4], p: &SeirsParams) -> [f64; 4] {
    let [s, e, i, r] = *state;
    let n = s + e + i + r;
    if n <= 0.0 {
        return [0.0; 4];
    }
    let infection = p.infection_rate * i * s / n;
    [
        p.birth_rate * n - infection + p.immunity_loss_rate * r,
        infection - p.incubation_rate * e,
        p.incubation_rate * e - p.recovery_rate * i,
        p.recovery_rate * i - p.immunity_loss_rate * r,
    ]
}

fn rk4_step(y: &[f64; 4], dt: f64, p: &SeirsParams) -> [f64; 4] {
    let ax = |y: &[f64; 4], k: &[f64; 4], c: f64| {
        [y[0] + c * k[0], y[1] + c * k[1], y[2] + c * k[2], y[3] + c * k[3]]
    };
    let k1 = seirs_rhs(y, p);
    let k2 = seirs_rhs(&ax(y, &k1, dt / 2.0), p);
    let k3 = seirs_rhs(&ax(y, &k2, dt / 2.0), p);
    let k4 = seirs_rhs(&ax(y, &k3, dt), p);
    let mut out = [0.0; 4];
    for j in 0..4 {
        out[j] = y[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
    out
}

/// Piecewise-constant truth parameters; entry days strictly increasing, the
/// first at day zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftSchedule {
    entries: Vec<(f64, SeirsParams)>,
}

impl ShiftSchedule {
    pub fn new(entries: Vec<(f64, SeirsParams)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("empty shift schedule".into()));
        }
        if entries[0].0 != 0.0 {
            return Err(Error::InvalidArgument(
                "shift schedule must start at day 0".into(),
            ));
        }
        if entries.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidArgument(
                "shift days must be strictly increasing".into(),
            ));
        }
        for (_, p) in &entries {
            p.validate()?;
        }
        Ok(Self { entries })
    }

    pub fn constant(params: SeirsParams) -> Self {
        Self {
            entries: vec![(0.0, params)],
        }
    }

    pub fn entries(&self) -> &[(f64, SeirsParams)] {
        &self.entries
    }

    /// Parameters governing the integrator step that starts at `t`.
    pub fn active(&self, t: f64) -> &SeirsParams {
        let mut current = &self.entries[0].1;
        for (day, p) in &self.entries {
            if *day <= t + 1e-12 {
                current = p;
            } else {
                break;
            }
        }
        current
    }
}

/// Dense fixed-step state trajectory, `states[n]` at `t0 + n*dt`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateSeries {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<[f64; 4]>,
}

impl StateSeries {
    pub fn end_time(&self) -> f64 {
        self.t0 + (self.states.len() - 1) as f64 * self.dt
    }

    pub fn state_at(&self, t: f64) -> Result<[f64; 4]> {
        let idx = ((t - self.t0) / self.dt).round();
        let grid_t = self.t0 + idx * self.dt;
        if (grid_t - t).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "time {t} is not on the integration grid"
            )));
        }
        if idx < 0.0 || idx as usize >= self.states.len() {
            return Err(Error::InvalidArgument(format!(
                "time {t} outside the simulated horizon"
            )));
        }
        Ok(self.states[idx as usize])
    }
}

/// Classical RK4 with a piecewise-constant schedule; parameters switch at
/// the first step boundary at or after each shift day.
pub fn rk4_simulate(
    schedule: &ShiftSchedule,
    init: [f64; 4],
    t0: f64,
    dt: f64,
    t_end: f64,
) -> Result<StateSeries> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let span = t_end - t0;
    let steps = (span / dt).round();
    if steps < 0.0 || (steps * dt - span).abs() > 1e-9 * span.abs().max(1.0) {
        return Err(Error::InvalidArgument(
            "horizon must be a whole number of steps".into(),
        ));
    }
    let steps = steps as usize;
    let mut states = Vec::with_capacity(steps + 1);
    let mut y = init;
    states.push(y);
    for n in 0..steps {
        let t = t0 + n as f64 * dt;
        let p = schedule.active(t);
        y = rk4_step(&y, dt, p);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationFailure { time: t + dt });
        }
        states.push(y);
    }
    Ok(StateSeries { t0, dt, states })
}

/// Initial condition handed to every sample simulation in one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowInit {
    pub window_index: usize,
    pub start_time: f64,
    pub state: [f64; 4],
}

/// Forward model for windowed estimation: each sample holds its four rates
/// fixed and integrates from the window's shared initial state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeirsSimulator {
    pub dt: f64,
    pub window_inits: Vec<WindowInit>,
}

impl SeirsSimulator {
    fn init_for(&self, window_index: usize) -> Result<&WindowInit> {
        self.window_inits
            .iter()
            .find(|w| w.window_index == window_index)
            .ok_or_else(|| Error::ProtocolViolation {
                details: format!("no initial state stored for window {window_index}"),
            })
    }
}

impl Simulator for SeirsSimulator {
    fn simulate(&self, samples: &DMatrix<f64>, packet: &DataPacket) -> Result<DMatrix<f64>> {
        if samples.ncols() != 4 {
            return Err(Error::DimensionMismatch {
                context: "seirs parameter dimension",
                expected: 4,
                found: samples.ncols(),
            });
        }
        let init = self.init_for(packet.window_index)?;
        let t_end = *packet.times.last().expect("validated packet");
        let rows: Vec<Vec<f64>> = (0..samples.nrows())
            .into_par_iter()
            .map(|i| -> Result<Vec<f64>> {
                let p = SeirsParams::new(
                    samples[(i, 0)],
                    samples[(i, 1)],
                    samples[(i, 2)],
                    samples[(i, 3)],
                );
                let series = rk4_simulate(
                    &ShiftSchedule::constant(p),
                    init.state,
                    init.start_time,
                    self.dt,
                    t_end,
                )
                .map_err(|e| Error::SimulationFailure {
                    sample: i,
                    reason: e.to_string(),
                })?;
                packet
                    .times
                    .iter()
                    .map(|t| series.state_at(*t).map(|s| s[2]))
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = DMatrix::zeros(samples.nrows(), packet.len());
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        Ok(out)
    }
}

/// Truth run artifacts: the dense trajectory, daily infected-count packets
/// grouped into fixed-length windows, and each window's starting state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeirsTruth {
    pub series: StateSeries,
    pub packets: Vec<DataPacket>,
    pub window_inits: Vec<WindowInit>,
}

pub fn seirs_truth(
    schedule: &ShiftSchedule,
    init: [f64; 4],
    dt: f64,
    window_days: usize,
    n_windows: usize,
    obs_sigma: f64,
    noise_seed: u64,
) -> Result<SeirsTruth> {
    if window_days == 0 || n_windows == 0 {
        return Err(Error::InvalidArgument(
            "window length and count must be positive".into(),
        ));
    }
    if obs_sigma <= 0.0 {
        return Err(Error::InvalidNoiseModel {
            index: 0,
            sigma: obs_sigma,
        });
    }
    let t_end = (window_days * n_windows) as f64;
    let series = rk4_simulate(schedule, init, 0.0, dt, t_end)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut packets = Vec::with_capacity(n_windows);
    let mut window_inits = Vec::with_capacity(n_windows);
    for m in 1..=n_windows {
        let start_day = (m - 1) * window_days;
        window_inits.push(WindowInit {
            window_index: m,
            start_time: start_day as f64,
            state: series.state_at(start_day as f64)?,
        });
        let times: Vec<f64> = (1..=window_days).map(|d| (start_day + d) as f64).collect();
        let values: Vec<f64> = times
            .iter()
            .map(|t| {
                let xi: f64 = StandardNormal.sample(&mut rng);
                Ok(series.state_at(*t)?[2] + obs_sigma * xi)
            })
            .collect::<Result<Vec<f64>>>()?;
        packets.push(DataPacket {
            window_index: m,
            times,
            values,
            sigmas: vec![obs_sigma; window_days],
            sensor_ids: vec!["I".to_string(); window_days],
        });
    }
    Ok(SeirsTruth {
        series,
        packets,
        window_inits,
    })
}
