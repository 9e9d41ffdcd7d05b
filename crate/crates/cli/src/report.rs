//! Plot-ready summaries of a finished run: diagnostic time series with
//! threshold columns, per-window error norms against the stored truth, and
//! 1D marginal density grids from the final weighted ensemble.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use dcseq::io::{load_checkpoint, read_diagnostics, DiagnosticsRow};
use dcseq::kde::wkde_fit;
use dcseq::models::Grid2d;
use nalgebra::{DMatrix, DVector};

use crate::config::{self, ModelSpec, Resolved};
use crate::truth::LinearTruth;
use crate::CliError;

pub fn run(run_dir: &Path, grid_points: usize) -> Result<(), CliError> {
    if grid_points < 2 {
        return Err(CliError::config("--grid-points: need at least 2"));
    }
    let cfg = config::load_resolved(run_dir)?;
    let rows = read_diagnostics(&run_dir.join("diagnostics.csv"))?;
    let out = run_dir.join("report");
    std::fs::create_dir_all(&out).map_err(CliError::runtime_io)?;

    diagnostics_series(&cfg, &rows, &out)?;
    errors_table(&cfg, &rows, run_dir, &out)?;
    marginals(run_dir, &out, grid_points)?;
    Ok(())
}

/// E_init(r) and KL per window, with the acceptance band and drift threshold
/// as columns so threshold lines plot directly.
fn diagnostics_series(cfg: &Resolved, rows: &[DiagnosticsRow], out: &Path) -> Result<(), CliError> {
    let mut f = create(&out.join("diagnostics_series.csv"))?;
    writeln!(
        f,
        "window,q_used,expected_ratio,e_accept_low,e_accept_high,kl_dci,eps_kl,eff_fraction,decision,change_point_flag"
    )
    .map_err(CliError::runtime_io)?;
    let t = &cfg.thresholds;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            r.window,
            r.q_used,
            r.expected_ratio,
            1.0 - t.eps_pred,
            1.0 + t.eps_pred,
            r.kl_dci,
            t.eps_kl,
            r.eff_fraction,
            r.decision,
            r.change_point_flag
        )
        .map_err(CliError::runtime_io)?;
    }
    Ok(())
}

fn errors_table(
    cfg: &Resolved,
    rows: &[DiagnosticsRow],
    run_dir: &Path,
    out: &Path,
) -> Result<(), CliError> {
    match &cfg.model {
        ModelSpec::Linear { .. } => {
            let truth: LinearTruth = read_json(&run_dir.join("truth.json"))?;
            let mut f = create(&out.join("errors.csv"))?;
            writeln!(f, "window,err_l2,err_linf").map_err(CliError::runtime_io)?;
            for r in rows {
                let (l2, linf) = vector_errors(&r.mud, &truth.lambda_true);
                writeln!(f, "{},{l2},{linf}", r.window).map_err(CliError::runtime_io)?;
            }
            Ok(())
        }
        ModelSpec::Seirs { window_days, .. } => {
            let schedule = cfg.seirs_schedule()?;
            let mut f = create(&out.join("errors.csv"))?;
            writeln!(
                f,
                "window,day,err_lambda1,err_lambda2,err_lambda3,err_lambda4,err_l2"
            )
            .map_err(CliError::runtime_io)?;
            for r in rows {
                let day = (r.window * window_days) as f64;
                let active = schedule.active(day).rates();
                let diffs: Vec<f64> = r
                    .mud
                    .iter()
                    .zip(active.iter())
                    .map(|(m, t)| (m - t).abs())
                    .collect();
                let l2 = diffs.iter().map(|d| d * d).sum::<f64>().sqrt();
                writeln!(
                    f,
                    "{},{day},{},{},{},{},{l2}",
                    r.window, diffs[0], diffs[1], diffs[2], diffs[3]
                )
                .map_err(CliError::runtime_io)?;
            }
            Ok(())
        }
        ModelSpec::Heat {
            grid_n, domain, ..
        } => {
            let truth: dcseq::models::HeatTruth = read_json(&run_dir.join("truth.json"))?;
            let grid = Grid2d::new(*grid_n, domain[0], domain[1])
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let quad = grid.quad_weights();
            let norm = weighted_l2(&quad, &truth.field_values, None);
            let ones = DVector::from_element(truth.field_values.len(), 1.0);
            let constant_rel = weighted_l2(&quad, &truth.field_values, Some(&ones)) / norm;
            let mut f = create(&out.join("errors.csv"))?;
            writeln!(f, "window,rel_l2,constant_rel_l2").map_err(CliError::runtime_io)?;
            for r in rows {
                let path = run_dir.join("fields").join(format!("window_{}.csv", r.window));
                if !path.exists() {
                    continue;
                }
                let field = read_field(&path, truth.field_values.len())?;
                let rel = weighted_l2(&quad, &truth.field_values, Some(&field)) / norm;
                writeln!(f, "{},{rel},{constant_rel}", r.window).map_err(CliError::runtime_io)?;
            }
            Ok(())
        }
        // A store replay has no bundled truth; errors need the generating
        // run's truth.json, so only emit the table when it is present.
        ModelSpec::Offline { .. } => {
            let path = run_dir.join("truth.json");
            if !path.exists() {
                return Ok(());
            }
            let truth: LinearTruth = read_json(&path)?;
            let mut f = create(&out.join("errors.csv"))?;
            writeln!(f, "window,err_l2,err_linf").map_err(CliError::runtime_io)?;
            for r in rows {
                let (l2, linf) = vector_errors(&r.mud, &truth.lambda_true);
                writeln!(f, "{},{l2},{linf}", r.window).map_err(CliError::runtime_io)?;
            }
            Ok(())
        }
    }
}

/// Weighted-KDE density grids of the final ensemble, one file per parameter.
fn marginals(run_dir: &Path, out: &Path, grid_points: usize) -> Result<(), CliError> {
    let snapshot = load_checkpoint(&run_dir.join("checkpoint.json"))?;
    let ens = &snapshot.ensemble;
    for j in 0..ens.dim() {
        let col = DMatrix::from_fn(ens.size(), 1, |i, _| ens.samples[(i, j)]);
        let est = wkde_fit(&col, Some(&ens.weights))?;
        let h = est.bandwidths()[0];
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
        let mut f = create(&out.join(format!("marginal_{}.csv", j + 1)))?;
        writeln!(f, "x,density").map_err(CliError::runtime_io)?;
        let step = (hi - lo) / (grid_points - 1) as f64;
        for g in 0..grid_points {
            let x = lo + g as f64 * step;
            writeln!(f, "{x},{}", est.eval(&[x])).map_err(CliError::runtime_io)?;
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(
        File::create(path).map_err(CliError::runtime_io)?,
    ))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn vector_errors(mud: &[f64], truth: &[f64]) -> (f64, f64) {
    let l2 = mud
        .iter()
        .zip(truth)
        .map(|(m, t)| (m - t) * (m - t))
        .sum::<f64>()
        .sqrt();
    let linf = mud
        .iter()
        .zip(truth)
        .map(|(m, t)| (m - t).abs())
        .fold(0.0, f64::max);
    (l2, linf)
}

fn weighted_l2(quad: &DVector<f64>, truth: &DVector<f64>, field: Option<&DVector<f64>>) -> f64 {
    (0..truth.len())
        .map(|i| {
            let d = match field {
                Some(f) => f[i] - truth[i],
                None => truth[i],
            };
            quad[i] * d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn read_field(path: &Path, expected: usize) -> Result<DVector<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::runtime_io)?;
    let mut values = Vec::with_capacity(expected);
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let v = line
            .rsplit(',')
            .next()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| CliError::Runtime(format!("{}: bad row {}", path.display(), i + 1)))?;
        values.push(v);
    }
    if values.len() != expected {
        return Err(CliError::Runtime(format!(
            "{}: expected {expected} field values, found {}",
            path.display(),
            values.len()
        )));
    }
    Ok(DVector::from_vec(values))
}
