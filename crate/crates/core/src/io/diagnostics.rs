//! Per-window diagnostics table.
//!
//! Comma-separated text with a fixed column set:
//! `window,q_used,expected_ratio,kl_dci,eff_fraction,decision,change_point_flag,mud_0..mud_{p-1}`.
//! Floats are written in exponent form, which round-trips exactly.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sequential::WindowRecord;

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

/// Append-per-window writer; the header is committed at construction and
/// every row is flushed so a crash loses at most the in-flight window.
pub struct DiagnosticsWriter {
    out: BufWriter<File>,
    mud_dim: usize,
}

impl DiagnosticsWriter {
    pub fn create(path: &Path, mud_dim: usize) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let mut header =
            String::from("window,q_used,expected_ratio,kl_dci,eff_fraction,decision,change_point_flag");
        for j in 0..mud_dim {
            header.push_str(&format!(",mud_{j}"));
        }
        header.push('\n');
        out.write_all(header.as_bytes())?;
        out.flush()?;
        Ok(Self { out, mud_dim })
    }

    /// Reopen an existing table to continue after a resume; the header must
    /// already match the requested dimension.
    pub fn open_append(path: &Path, mud_dim: usize) -> Result<Self> {
        let rows = read_diagnostics(path)?;
        if let Some(row) = rows.last() {
            if row.mud.len() != mud_dim {
                return Err(Error::DimensionMismatch {
                    context: "diagnostics mud dimension",
                    expected: mud_dim,
                    found: row.mud.len(),
                });
            }
        }
        let out = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        Ok(Self { out, mud_dim })
    }

    pub fn append(&mut self, record: &WindowRecord) -> Result<()> {
        if record.mud_point.len() != self.mud_dim {
            return Err(Error::DimensionMismatch {
                context: "diagnostics mud dimension",
                expected: self.mud_dim,
                found: record.mud_point.len(),
            });
        }
        let mut row = format!(
            "{},{},{},{},{},{},{}",
            record.window_index,
            record.q_used,
            fmt(record.expected_ratio),
            fmt(record.kl_dci),
            fmt(record.eff_fraction),
            record.decision,
            record.change_point_flag,
        );
        for v in &record.mud_point {
            row.push(',');
            row.push_str(&fmt(*v));
        }
        row.push('\n');
        self.out.write_all(row.as_bytes())?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_diagnostics(records: &[WindowRecord], path: &Path) -> Result<()> {
    let first = records.first().ok_or_else(|| {
        Error::InvalidArgument("diagnostics table needs at least one record".into())
    })?;
    let mut writer = DiagnosticsWriter::create(path, first.mud_point.len())?;
    for r in records {
        writer.append(r)?;
    }
    Ok(())
}

/// One parsed diagnostics row.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRow {
    pub window: usize,
    pub q_used: usize,
    pub expected_ratio: f64,
    pub kl_dci: f64,
    pub eff_fraction: f64,
    pub decision: String,
    pub change_point_flag: bool,
    pub mud: Vec<f64>,
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<DiagnosticsRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line_no == 1 {
            if !line.starts_with("window,q_used,") {
                return Err(Error::ParseError {
                    line: 1,
                    message: "unexpected diagnostics header".into(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() < 7 {
            return Err(Error::ParseError {
                line: line_no,
                message: format!("expected at least 7 columns, found {}", parts.len()),
            });
        }
        let bad = |what: &str| Error::ParseError {
            line: line_no,
            message: format!("bad {what}"),
        };
        rows.push(DiagnosticsRow {
            window: parts[0].parse().map_err(|_| bad("window"))?,
            q_used: parts[1].parse().map_err(|_| bad("q_used"))?,
            expected_ratio: parts[2].parse().map_err(|_| bad("expected_ratio"))?,
            kl_dci: parts[3].parse().map_err(|_| bad("kl_dci"))?,
            eff_fraction: parts[4].parse().map_err(|_| bad("eff_fraction"))?,
            decision: parts[5].to_string(),
            change_point_flag: parts[6].parse().map_err(|_| bad("change_point_flag"))?,
            mud: parts[7..]
                .iter()
                .map(|s| s.parse().map_err(|_| bad("mud component")))
                .collect::<Result<Vec<f64>>>()?,
        });
    }
    Ok(rows)
}
