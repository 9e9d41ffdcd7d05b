//! Heat diffusion on a square with a spatially varying multiplier:
//! `du/dt = k(x) lap(u) + f`, homogeneous Dirichlet walls.
//!
//! Backward Euler on the 5-point Laplacian.  Dividing each interior row by
//! its `k` value symmetrizes the step matrix `(K^-1 - dt L)`, which is SPD
//! and banded with bandwidth `n - 2`, so one banded Cholesky factorization
//! per field serves every time step.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::kl::{kl_realize, Grid2d, KlField};
use crate::models::sensors::SensorSet;
use crate::sequential::{DataPacket, Simulator};

/// Forcing used by the experiments: `10 sin(6 pi t) x1 + 10 cos(4 pi t) x2`.
pub fn experiment_forcing(x1: f64, x2: f64, t: f64) -> f64 {
    10.0 * (6.0 * std::f64::consts::PI * t).sin() * x1
        + 10.0 * (4.0 * std::f64::consts::PI * t).cos() * x2
}

/// Initial temperature `exp(-5 ||x||^2)` at every node.
pub fn gaussian_bump(grid: &Grid2d) -> DVector<f64> {
    DVector::from_fn(grid.node_count(), |p, _| {
        let [x, y] = grid.node(p);
        (-5.0 * (x * x + y * y)).exp()
    })
}

struct BandedSpd {
    m: usize,
    bw: usize,
    /// Column-major band: `band[j * (bw + 1) + r] = L[j + r, j]`.
    band: Vec<f64>,
}

impl BandedSpd {
    /// In-place Cholesky of a lower-band matrix given in the same layout.
    fn factor(mut band: Vec<f64>, m: usize, bw: usize) -> Result<Self> {
        assert_eq!(band.len(), m * (bw + 1));
        let idx = |r: usize, j: usize| j * (bw + 1) + r;
        for j in 0..m {
            let k0 = j.saturating_sub(bw);
            let mut d = band[idx(0, j)];
            for k in k0..j {
                let l = band[idx(j - k, k)];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::SolverFailure {
                    reason: format!("pivot {d} at row {j} is not positive"),
                });
            }
            let dj = d.sqrt();
            band[idx(0, j)] = dj;
            let imax = (j + bw).min(m - 1);
            for i in (j + 1)..=imax {
                let mut s = band[idx(i - j, j)];
                let kk0 = k0.max(i.saturating_sub(bw));
                for k in kk0..j {
                    s -= band[idx(i - k, k)] * band[idx(j - k, k)];
                }
                band[idx(i - j, j)] = s / dj;
            }
        }
        Ok(Self { m, bw, band })
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let idx = |r: usize, j: usize| j * (self.bw + 1) + r;
        for j in 0..self.m {
            b[j] /= self.band[idx(0, j)];
            let xj = b[j];
            let imax = (j + self.bw).min(self.m - 1);
            for i in (j + 1)..=imax {
                b[i] -= self.band[idx(i - j, j)] * xj;
            }
        }
        for j in (0..self.m).rev() {
            let mut s = b[j];
            let imax = (j + self.bw).min(self.m - 1);
            for i in (j + 1)..=imax {
                s -= self.band[idx(i - j, j)] * b[i];
            }
            b[j] = s / self.band[idx(0, j)];
        }
    }
}

fn capture_steps(dt: f64, t0: f64, times: &[f64], total_steps: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(times.len());
    for t in times {
        let idx = ((t - t0) / dt).round();
        let grid_t = t0 + idx * dt;
        if (grid_t - t).abs() > 1e-9 * t.abs().max(1.0) || idx < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "capture time {t} is not a step boundary"
            )));
        }
        let idx = idx as usize;
        if idx > total_steps {
            return Err(Error::InvalidArgument(format!(
                "capture time {t} beyond the integration horizon"
            )));
        }
        if let Some(last) = out.last() {
            if idx < *last {
                return Err(Error::InvalidArgument(
                    "capture times must be nondecreasing".into(),
                ));
            }
        }
        out.push(idx);
    }
    Ok(out)
}

/// March the field from `u0` at `t0` and return full-grid snapshots at the
/// requested times (step-aligned, nondecreasing; the last sets the horizon).
pub fn heat_solve<F>(
    diffusivity: &DVector<f64>,
    grid: &Grid2d,
    dt: f64,
    t0: f64,
    u0: &DVector<f64>,
    times: &[f64],
    forcing: &F,
) -> Result<Vec<DVector<f64>>>
where
    F: Fn(f64, f64, f64) -> f64,
{
    let n = grid.n();
    if n < 3 {
        return Err(Error::InvalidArgument("grid too coarse to have interior".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    if diffusivity.len() != grid.node_count() || u0.len() != grid.node_count() {
        return Err(Error::DimensionMismatch {
            context: "heat field/state length",
            expected: grid.node_count(),
            found: diffusivity.len().min(u0.len()),
        });
    }
    if diffusivity.iter().any(|k| !k.is_finite() || *k <= 0.0) {
        return Err(Error::SolverFailure {
            reason: "diffusivity must be finite and positive".into(),
        });
    }
    if times.is_empty() {
        return Err(Error::InvalidArgument("no capture times requested".into()));
    }
    let span = times[times.len() - 1] - t0;
    let total_steps = (span / dt).round();
    if total_steps < 0.0 || (total_steps * dt - span).abs() > 1e-9 * span.abs().max(1.0) {
        return Err(Error::InvalidArgument(
            "horizon must be a whole number of steps".into(),
        ));
    }
    let total_steps = total_steps as usize;
    let capture = capture_steps(dt, t0, times, total_steps)?;

    let ni = n - 2;
    let m = ni * ni;
    let bw = ni;
    let h = grid.h();
    let h2 = h * h;
    let interior = |p: usize| -> usize {
        let ix = p / ni + 1;
        let iy = p % ni + 1;
        grid.index(ix, iy)
    };

    // Assemble (K^-1 - dt L) in band form.
    let mut band = vec![0.0; m * (bw + 1)];
    for p in 0..m {
        let node = interior(p);
        band[p * (bw + 1)] = 1.0 / diffusivity[node] + 4.0 * dt / h2;
        let iy = p % ni;
        if iy + 1 < ni {
            band[p * (bw + 1) + 1] = -dt / h2;
        }
        if p + ni < m {
            band[p * (bw + 1) + bw] = -dt / h2;
        }
    }
    let chol = BandedSpd::factor(band, m, bw)?;

    let mut u: Vec<f64> = (0..m).map(|p| u0[interior(p)]).collect();
    let full_snapshot = |u: &[f64], step: usize| -> DVector<f64> {
        if step == 0 {
            return u0.clone();
        }
        let mut out = DVector::zeros(grid.node_count());
        for p in 0..m {
            out[interior(p)] = u[p];
        }
        out
    };

    let mut snapshots = Vec::with_capacity(times.len());
    let mut next = 0usize;
    while next < capture.len() && capture[next] == 0 {
        snapshots.push(full_snapshot(&u, 0));
        next += 1;
    }
    let mut rhs = vec![0.0; m];
    for step in 1..=total_steps {
        let t_new = t0 + step as f64 * dt;
        for p in 0..m {
            let node = interior(p);
            let [x, y] = grid.node(node);
            rhs[p] = (u[p] + dt * forcing(x, y, t_new)) / diffusivity[node];
        }
        chol.solve_in_place(&mut rhs);
        std::mem::swap(&mut u, &mut rhs);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationFailure { time: t_new });
        }
        while next < capture.len() && capture[next] == step {
            snapshots.push(full_snapshot(&u, step));
            next += 1;
        }
    }
    Ok(snapshots)
}

/// Bilinear interpolation of node values at an interior point.
pub fn bilinear(grid: &Grid2d, values: &DVector<f64>, point: [f64; 2]) -> Result<f64> {
    let n = grid.n();
    let h = grid.h();
    let tol = 1e-9 * h;
    for c in point {
        if !c.is_finite() || c < grid.lower() - tol || c > grid.upper() + tol {
            return Err(Error::InvalidArgument(format!(
                "point ({}, {}) outside the grid",
                point[0], point[1]
            )));
        }
    }
    let cell = |c: f64| -> (usize, f64) {
        let f = ((c - grid.lower()) / h).max(0.0);
        let i = (f.floor() as usize).min(n - 2);
        (i, (f - i as f64).clamp(0.0, 1.0))
    };
    let (ix, fx) = cell(point[0]);
    let (iy, fy) = cell(point[1]);
    let v00 = values[grid.index(ix, iy)];
    let v01 = values[grid.index(ix, iy + 1)];
    let v10 = values[grid.index(ix + 1, iy)];
    let v11 = values[grid.index(ix + 1, iy + 1)];
    Ok(v00 * (1.0 - fx) * (1.0 - fy)
        + v01 * (1.0 - fx) * fy
        + v10 * fx * (1.0 - fy)
        + v11 * fx * fy)
}

/// Temperature snapshot a window's sample simulations all start from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatWindowInit {
    pub window_index: usize,
    pub start_time: f64,
    pub state: DVector<f64>,
}

/// Truth artifacts: the realized field, its coefficients, noisy sensor
/// packets per window, and each window's starting temperature.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatTruth {
    pub coefficients: DVector<f64>,
    pub field_values: DVector<f64>,
    pub packets: Vec<DataPacket>,
    pub window_inits: Vec<HeatWindowInit>,
}

pub fn heat_truth(
    basis: &KlField,
    coefficients: &DVector<f64>,
    sensors: &SensorSet,
    dt: f64,
    window_seconds: f64,
    n_windows: usize,
    noise_seed: u64,
) -> Result<HeatTruth> {
    let grid = basis.grid;
    sensors.validate(&grid)?;
    if !(window_seconds > 0.0) || n_windows == 0 {
        return Err(Error::InvalidArgument(
            "window length and count must be positive".into(),
        ));
    }
    let horizon = window_seconds * n_windows as f64;
    if sensors
        .times
        .iter()
        .any(|t| *t <= 0.0 || *t > horizon + 1e-9)
    {
        return Err(Error::InvalidArgument(
            "sensor times must lie in (0, horizon]".into(),
        ));
    }
    let field_values = kl_realize(basis, coefficients)?;
    let u0 = gaussian_bump(&grid);

    // One full-horizon march capturing window starts and observation times.
    let mut capture: Vec<f64> = (0..n_windows).map(|m| m as f64 * window_seconds).collect();
    capture.extend(sensors.times.iter().copied());
    capture.sort_by(f64::total_cmp);
    let snapshots = heat_solve(
        &field_values,
        &grid,
        dt,
        0.0,
        &u0,
        &capture,
        &experiment_forcing,
    )?;
    let snapshot_at = |t: f64| -> &DVector<f64> {
        let pos = capture
            .iter()
            .position(|c| (c - t).abs() <= 1e-9 * t.abs().max(1.0))
            .expect("capture time present by construction");
        &snapshots[pos]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let sigma = sensors.noise_sigma;
    let mut packets = Vec::with_capacity(n_windows);
    let mut window_inits = Vec::with_capacity(n_windows);
    for m in 1..=n_windows {
        let start = (m - 1) as f64 * window_seconds;
        let end = m as f64 * window_seconds;
        window_inits.push(HeatWindowInit {
            window_index: m,
            start_time: start,
            state: snapshot_at(start).clone(),
        });
        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut ids = Vec::new();
        for t in sensors.times.iter().filter(|t| **t > start + 1e-12 && **t <= end + 1e-12) {
            let u = snapshot_at(*t);
            for (s, loc) in sensors.locations.iter().enumerate() {
                let clean = bilinear(&grid, u, *loc)?;
                let xi: f64 = StandardNormal.sample(&mut rng);
                times.push(*t);
                values.push(clean + sigma * xi);
                ids.push(format!("s{s}"));
            }
        }
        let n = values.len();
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "window {m} contains no sensor observations"
            )));
        }
        packets.push(DataPacket {
            window_index: m,
            times,
            values,
            sigmas: vec![sigma; n],
            sensor_ids: ids,
        });
    }
    Ok(HeatTruth {
        coefficients: coefficients.clone(),
        field_values,
        packets,
        window_inits,
    })
}

/// Forward model for windowed estimation: each sample realizes its field
/// from the shared basis and marches from the window's starting state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatSimulator {
    pub basis: KlField,
    pub dt: f64,
    pub sensor_locations: Vec<[f64; 2]>,
    pub window_inits: Vec<HeatWindowInit>,
}

impl HeatSimulator {
    fn init_for(&self, window_index: usize) -> Result<&HeatWindowInit> {
        self.window_inits
            .iter()
            .find(|w| w.window_index == window_index)
            .ok_or_else(|| Error::ProtocolViolation {
                details: format!("no initial state stored for window {window_index}"),
            })
    }

    fn sensor_index(&self, id: &str, measurement: usize) -> Result<usize> {
        id.strip_prefix('s')
            .and_then(|raw| raw.parse::<usize>().ok())
            .filter(|idx| *idx < self.sensor_locations.len())
            .ok_or(Error::InvalidSensor { index: measurement })
    }
}

impl Simulator for HeatSimulator {
    fn simulate(&self, samples: &DMatrix<f64>, packet: &DataPacket) -> Result<DMatrix<f64>> {
        if samples.ncols() != self.basis.mode_count() {
            return Err(Error::DimensionMismatch {
                context: "heat coefficient dimension",
                expected: self.basis.mode_count(),
                found: samples.ncols(),
            });
        }
        let init = self.init_for(packet.window_index)?;
        let grid = self.basis.grid;

        // Distinct observation instants and each measurement's slot.
        let mut distinct: Vec<f64> = Vec::new();
        let mut time_slot = Vec::with_capacity(packet.len());
        for t in &packet.times {
            match distinct.last() {
                Some(last) if (t - last).abs() <= 1e-12 => {}
                _ => distinct.push(*t),
            }
            time_slot.push(distinct.len() - 1);
        }
        let mut locs = Vec::with_capacity(packet.len());
        for (j, id) in packet.sensor_ids.iter().enumerate() {
            locs.push(self.sensor_locations[self.sensor_index(id, j)?]);
        }

        let rows: Vec<Vec<f64>> = (0..samples.nrows())
            .into_par_iter()
            .map(|i| -> Result<Vec<f64>> {
                let coeffs = samples.row(i).transpose();
                let field = kl_realize(&self.basis, &coeffs)?;
                let snaps = heat_solve(
                    &field,
                    &grid,
                    self.dt,
                    init.start_time,
                    &init.state,
                    &distinct,
                    &experiment_forcing,
                )
                .map_err(|e| Error::SimulationFailure {
                    sample: i,
                    reason: e.to_string(),
                })?;
                (0..packet.len())
                    .map(|j| bilinear(&grid, &snaps[time_slot[j]], locs[j]))
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
