//! Synthetic-truth generation: writes the noisy packet stream, the noiseless
//! truth artifacts for later error evaluation, and a resolved config copy.

use std::path::Path;

use dcseq::io::{write_packets, write_store, WindowColumns};
use dcseq::models::{heat_truth, kl_decompose, seirs_truth, HeatSimulator, LinearModel, SensorSet};
use dcseq::{SequentialEngine, Simulator};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::{self, ModelSpec, Resolved};
use crate::CliError;

pub fn generate(cfg: &Resolved, noiseless: bool) -> Result<(), CliError> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(CliError::runtime_io)?;
    match &cfg.model {
        ModelSpec::Linear { .. } => linear(cfg, &dir, noiseless),
        ModelSpec::Seirs { .. } => seirs(cfg, &dir, noiseless),
        ModelSpec::Heat { .. } => heat(cfg, &dir, noiseless),
        ModelSpec::Offline { .. } => Err(CliError::config(
            "model.kind: generate-truth needs a synthetic model (linear, seirs, or heat)",
        )),
    }?;
    config::write_resolved(cfg, &dir)
}

fn write_truth<T: Serialize>(dir: &Path, truth: &T) -> Result<(), CliError> {
    let text = serde_json::to_string(truth).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(dir.join("truth.json"), text).map_err(CliError::runtime_io)
}

pub fn linear_model(cfg: &Resolved) -> Result<(LinearModel, DVector<f64>), CliError> {
    let ModelSpec::Linear {
        sensor_matrix,
        offset,
        lambda_true,
        ..
    } = &cfg.model
    else {
        return Err(CliError::config("model: expected kind = linear"));
    };
    let rows = sensor_matrix.len();
    let cols = lambda_true.len();
    if rows == 0 || sensor_matrix.iter().any(|r| r.len() != cols) {
        return Err(CliError::config(
            "model.sensor_matrix: need nonempty rows, each as long as lambda_true",
        ));
    }
    if offset.len() != rows {
        return Err(CliError::config(
            "model.offset: length must match the sensor matrix rows",
        ));
    }
    let a = DMatrix::from_fn(rows, cols, |i, j| sensor_matrix[i][j]);
    let model = LinearModel::new(a, DVector::from_vec(offset.clone()))
        .map_err(|e| CliError::config(format!("model.sensor_matrix: {e}")))?;
    Ok((model, DVector::from_vec(lambda_true.clone())))
}

/// Truth artifacts for the linear model: just the generating parameter.
#[derive(Serialize, serde::Deserialize)]
pub struct LinearTruth {
    pub lambda_true: Vec<f64>,
}

fn linear(cfg: &Resolved, dir: &Path, noiseless: bool) -> Result<(), CliError> {
    let ModelSpec::Linear {
        sigma,
        windows,
        store,
        ..
    } = &cfg.model
    else {
        unreachable!()
    };
    let (model, lambda_true) = linear_model(cfg)?;
    let mut packets = model.truth_packets(&lambda_true, *sigma, *windows, cfg.seeds.truth_noise)?;
    if noiseless {
        let clean = model.measure(&lambda_true);
        for p in &mut packets {
            p.values = clean.iter().copied().collect();
        }
    }
    write_packets(&dir.join("packets.ndjson"), &packets)?;
    write_truth(
        dir,
        &LinearTruth {
            lambda_true: lambda_true.iter().copied().collect(),
        },
    )?;
    if *store {
        // The store must hold exactly the cloud a same-seeded engine will
        // draw, so materialize one and simulate every window noiselessly.
        let engine = SequentialEngine::new(
            cfg.engine_config(),
            model.clone(),
            cfg.initial.build(),
            cfg.ensemble_size,
            cfg.seeds.engine,
        )?;
        let samples = engine.ensemble().samples.clone();
        let mut windows_out = Vec::with_capacity(packets.len());
        for p in &packets {
            let sims = model.simulate(&samples, p)?;
            windows_out.push((WindowColumns::from_packet(p), sims));
        }
        write_store(&dir.join("store"), &samples, &windows_out)?;
    }
    Ok(())
}

fn seirs(cfg: &Resolved, dir: &Path, noiseless: bool) -> Result<(), CliError> {
    let ModelSpec::Seirs {
        init_state,
        dt,
        window_days,
        windows,
        sigma,
        ..
    } = &cfg.model
    else {
        unreachable!()
    };
    let schedule = cfg.seirs_schedule()?;
    let mut truth = seirs_truth(
        &schedule,
        *init_state,
        *dt,
        *window_days,
        *windows,
        *sigma,
        cfg.seeds.truth_noise,
    )?;
    if noiseless {
        for p in &mut truth.packets {
            for (v, t) in p.values.iter_mut().zip(&p.times) {
                *v = truth.series.state_at(*t)?[2];
            }
        }
    }
    write_packets(&dir.join("packets.ndjson"), &truth.packets)?;
    write_truth(dir, &truth)
}

pub struct HeatSetup {
    pub simulator: HeatSimulator,
    pub truth: dcseq::models::HeatTruth,
}

pub fn heat_setup(cfg: &Resolved) -> Result<HeatSetup, CliError> {
    let ModelSpec::Heat {
        grid_n,
        domain,
        modes,
        mean_log,
        marginal_std,
        correlation_length,
        coefficients,
        coefficient_seed,
        sensor_count,
        cadence,
        sigma,
        sensor_seed,
        dt,
        window_seconds,
        windows,
    } = &cfg.model
    else {
        return Err(CliError::config("model: expected kind = heat"));
    };
    let grid = dcseq::models::Grid2d::new(*grid_n, domain[0], domain[1])
        .map_err(|e| CliError::config(format!("model.grid_n: {e}")))?;
    let basis = kl_decompose(grid, *mean_log, *marginal_std, *correlation_length, *modes)
        .map_err(|e| CliError::config(format!("model.modes: {e}")))?;
    let coeffs = match coefficients {
        Some(c) => {
            if c.len() != *modes {
                return Err(CliError::config(
                    "model.coefficients: length must equal model.modes",
                ));
            }
            DVector::from_vec(c.clone())
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(*coefficient_seed);
            DVector::from_fn(*modes, |_, _| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
        }
    };
    let horizon = *window_seconds * *windows as f64;
    let sensors = SensorSet::random_uniform(
        *sensor_count,
        &grid,
        *cadence,
        horizon,
        *sigma,
        *sensor_seed,
    )
    .map_err(|e| CliError::config(format!("model.sensor_count: {e}")))?;
    let truth = heat_truth(
        &basis,
        &coeffs,
        &sensors,
        *dt,
        *window_seconds,
        *windows,
        cfg.seeds.truth_noise,
    )?;
    let simulator = HeatSimulator {
        basis,
        dt: *dt,
        sensor_locations: sensors.locations.clone(),
        window_inits: truth.window_inits.clone(),
    };
    Ok(HeatSetup { simulator, truth })
}

fn heat(cfg: &Resolved, dir: &Path, noiseless: bool) -> Result<(), CliError> {
    let setup = heat_setup(cfg)?;
    let mut packets = setup.truth.packets.clone();
    if noiseless {
        let row = DMatrix::from_fn(1, setup.truth.coefficients.len(), |_, j| {
            setup.truth.coefficients[j]
        });
        for p in &mut packets {
            let clean = setup.simulator.simulate(&row, p)?;
            p.values = clean.row(0).iter().copied().collect();
        }
    }
    write_packets(&dir.join("packets.ndjson"), &packets)?;
    write_truth(dir, &setup.truth)
}
