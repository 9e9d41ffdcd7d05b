//! Precomputed-ensemble store for offline runs: a fixed parameter matrix
//! plus one simulated-measurement matrix per window, with column metadata.
//!
//! Layout under the store directory:
//!   store.json        manifest (version, file names, per-window columns)
//!   parameters.csv    k x p, one sample per row
//!   window_<m>.csv    k x n_m noiseless simulated measurements

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequential::{DataPacket, Simulator};

pub const STORE_VERSION: &str = "dcseq.store.v1";

/// Column metadata for one stored window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowColumns {
    pub window_index: usize,
    pub times: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub sensor_ids: Vec<String>,
}

impl WindowColumns {
    pub fn from_packet(packet: &DataPacket) -> Self {
        Self {
            window_index: packet.window_index,
            times: packet.times.clone(),
            sigmas: packet.sigmas.clone(),
            sensor_ids: packet.sensor_ids.clone(),
        }
    }

    fn len(&self) -> usize {
        self.times.len()
    }

    fn validate(&self) -> Result<()> {
        if self.times.len() != self.sigmas.len() || self.times.len() != self.sensor_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "window {}: metadata lengths disagree",
                self.window_index
            )));
        }
        if self.times.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "window {}: no columns",
                self.window_index
            )));
        }
        for (j, s) in self.sigmas.iter().enumerate() {
            if !s.is_finite() || *s <= 0.0 {
                return Err(Error::InvalidNoiseModel {
                    index: j,
                    sigma: *s,
                });
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    parameter_file: String,
    windows: Vec<ManifestWindow>,
}

#[derive(Serialize, Deserialize)]
struct ManifestWindow {
    file: String,
    columns: WindowColumns,
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        out.write_all(row.join(",").as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.parse().map_err(|_| Error::ParseError {
                    line: i + 1,
                    message: format!("bad float {s:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::ParseError {
                    line: i + 1,
                    message: format!("ragged row: {} vs {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::ParseError {
            line: 1,
            message: "empty matrix file".into(),
        });
    }
    let (k, n) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(k, n, |i, j| rows[i][j]))
}

/// Write a store directory; `windows` pairs column metadata with the
/// noiseless k x n simulated-measurement matrix.
pub fn write_store(
    dir: &Path,
    samples: &DMatrix<f64>,
    windows: &[(WindowColumns, DMatrix<f64>)],
) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("store needs at least one window".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        version: STORE_VERSION.to_string(),
        parameter_file: "parameters.csv".into(),
        windows: Vec::with_capacity(windows.len()),
    };
    write_matrix_csv(&dir.join("parameters.csv"), samples)?;
    for (columns, sims) in windows {
        columns.validate()?;
        if sims.nrows() != samples.nrows() {
            return Err(Error::DimensionMismatch {
                context: "store window row count",
                expected: samples.nrows(),
                found: sims.nrows(),
            });
        }
        if sims.ncols() != columns.len() {
            return Err(Error::DimensionMismatch {
                context: "store window column count",
                expected: columns.len(),
                found: sims.ncols(),
            });
        }
        let file = format!("window_{}.csv", columns.window_index);
        write_matrix_csv(&dir.join(&file), sims)?;
        manifest.windows.push(ManifestWindow {
            file,
            columns: columns.clone(),
        });
    }
    let mut out = BufWriter::new(File::create(dir.join("store.json"))?);
    serde_json::to_writer_pretty(&mut out, &manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest serialization: {e}")))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// A loaded store; every matrix is held in memory.
#[derive(Clone, Debug)]
pub struct EnsembleStore {
    pub samples: DMatrix<f64>,
    pub windows: Vec<(WindowColumns, DMatrix<f64>)>,
}

impl EnsembleStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path: PathBuf = dir.join("store.json");
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(
            &manifest_path,
        )?))
        .map_err(|e| Error::ParseError {
            line: 0,
            message: format!("store manifest: {e}"),
        })?;
        if manifest.version != STORE_VERSION {
            return Err(Error::ProtocolViolation {
                details: format!(
                    "store version {} (this build reads {STORE_VERSION})",
                    manifest.version
                ),
            });
        }
        let samples = read_matrix_csv(&dir.join(&manifest.parameter_file))?;
        let mut windows = Vec::with_capacity(manifest.windows.len());
        for w in manifest.windows {
            w.columns.validate()?;
            let sims = read_matrix_csv(&dir.join(&w.file))?;
            if sims.nrows() != samples.nrows() {
                return Err(Error::DimensionMismatch {
                    context: "store window row count",
                    expected: samples.nrows(),
                    found: sims.nrows(),
                });
            }
            if sims.ncols() != w.columns.len() {
                return Err(Error::DimensionMismatch {
                    context: "store window column count",
                    expected: w.columns.len(),
                    found: sims.ncols(),
                });
            }
            windows.push((w.columns, sims));
        }
        Ok(Self { samples, windows })
    }

    /// Observed-data packets consistent with the stored metadata; values
    /// must be supplied per window (e.g., noisy truth readings).
    pub fn packet(&self, window_index: usize, values: Vec<f64>) -> Result<DataPacket> {
        let (columns, _) = self
            .windows
            .iter()
            .find(|(c, _)| c.window_index == window_index)
            .ok_or_else(|| Error::ProtocolViolation {
                details: format!("window {window_index} not in store"),
            })?;
        if values.len() != columns.len() {
            return Err(Error::DimensionMismatch {
                context: "store packet values",
                expected: columns.len(),
                found: values.len(),
            });
        }
        Ok(DataPacket {
            window_index,
            times: columns.times.clone(),
            values,
            sigmas: columns.sigmas.clone(),
            sensor_ids: columns.sensor_ids.clone(),
        })
    }
}

/// Serves stored simulations instead of running a model.  The engine must
/// present exactly the stored parameter rows: any new or reordered samples
/// mean the offline contract was broken (offline runs re-weight only).
#[derive(Clone, Debug)]
pub struct OfflineSimulator {
    store: EnsembleStore,
}

impl OfflineSimulator {
    pub fn new(store: EnsembleStore) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &EnsembleStore {
        &self.store
    }
}

impl Simulator for OfflineSimulator {
    fn simulate(&self, samples: &DMatrix<f64>, packet: &DataPacket) -> Result<DMatrix<f64>> {
        if samples != &self.store.samples {
            return Err(Error::ProtocolViolation {
                details: "offline run requested simulations for samples not in the store".into(),
            });
        }
        let (columns, sims) = self
            .store
            .windows
            .iter()
            .find(|(c, _)| c.window_index == packet.window_index)
            .ok_or_else(|| Error::ProtocolViolation {
                details: format!("window {} not in store", packet.window_index),
            })?;
        if packet.len() != columns.len() {
            return Err(Error::DimensionMismatch {
                context: "offline packet size",
                expected: columns.len(),
                found: packet.len(),
            });
        }
        Ok(sims.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn make_store() -> (DMatrix<f64>, Vec<(WindowColumns, DMatrix<f64>)>) {
        let samples = DMatrix::from_fn(12, 2, |i, j| i as f64 * 0.25 - j as f64 * 1e-7);
        let windows = (1..=2)
            .map(|m| {
                let columns = WindowColumns {
                    window_index: m,
                    times: vec![m as f64, m as f64 + 0.5, m as f64 + 1.0],
                    sigmas: vec![0.1; 3],
                    sensor_ids: vec!["a".into(), "b".into(), "c".into()],
                };
                let sims = DMatrix::from_fn(12, 3, |i, j| {
                    (i as f64 + 1.0) * (j as f64 + 1.0) * 1e-3 * m as f64
                });
                (columns, sims)
            })
            .collect();
        (samples, windows)
    }

    #[test]
    fn store_round_trips_bitwise() {
        let dir = tempdir().unwrap();
        let (samples, windows) = make_store();
        write_store(dir.path(), &samples, &windows).unwrap();
        let store = EnsembleStore::open(dir.path()).unwrap();
        assert_eq!(store.samples, samples);
        assert_eq!(store.windows.len(), 2);
        for ((ca, ma), (cb, mb)) in store.windows.iter().zip(&windows) {
            assert_eq!(ca, cb);
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn offline_simulator_serves_stored_rows_and_rejects_strangers() {
        let dir = tempdir().unwrap();
        let (samples, windows) = make_store();
        write_store(dir.path(), &samples, &windows).unwrap();
        let store = EnsembleStore::open(dir.path()).unwrap();
        let packet = store.packet(2, vec![0.0; 3]).unwrap();
        let sim = OfflineSimulator::new(store);
        let out = sim.simulate(&samples, &packet).unwrap();
        assert_eq!(out, windows[1].1);

        let mut strangers = samples.clone();
        strangers[(0, 0)] += 1e-9;
        assert!(matches!(
            sim.simulate(&strangers, &packet),
            Err(Error::ProtocolViolation { .. })
        ));
    }

    #[test]
    fn row_count_disagreement_is_rejected_at_open() {
        let dir = tempdir().unwrap();
        let (samples, windows) = make_store();
        write_store(dir.path(), &samples, &windows).unwrap();
        // Truncate one window file by a row.
        let path = dir.path().join("window_2.csv");
        let text = std::fs::read_to_string(&path).unwrap();
        let shorter: Vec<&str> = text.lines().take(11).collect();
        std::fs::write(&path, shorter.join("\n")).unwrap();
        assert!(matches!(
            EnsembleStore::open(dir.path()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unknown_window_is_a_protocol_violation() {
        let dir = tempdir().unwrap();
        let (samples, windows) = make_store();
        write_store(dir.path(), &samples, &windows).unwrap();
        let store = EnsembleStore::open(dir.path()).unwrap();
        let mut packet = store.packet(1, vec![0.0; 3]).unwrap();
        packet.window_index = 9;
        let sim = OfflineSimulator::new(store);
        assert!(matches!(
            sim.simulate(&samples, &packet),
            Err(Error::ProtocolViolation { .. })
        ));
    }
}
