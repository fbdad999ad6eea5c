//! CSV and JSON persistence of logs, demonstrations and reports.
//!
//! Floats are written in their shortest round-trip form, so reading a file
//! back reproduces the in-memory values exactly and identical runs produce
//! identical bytes.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::planner::PlannerDiagnostics;
use crate::promp::Demonstration;

use super::session::{LogRow, SessionLog};

fn format_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Format { path: path.to_path_buf(), message: message.to_string() }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads an upstream artifact; a missing file is reported as such.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    w.write_record(header).map_err(|e| format_err(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|x| x.to_string())).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| format_err(path, e))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e))?;
        let values = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| format_err(path, format!("row {}: {e}", k + 1)))?;
        rows.push(values);
    }
    Ok((header, rows))
}

pub fn write_log_csv(path: &Path, log: &SessionLog) -> Result<()> {
    write_rows(path, &SessionLog::header(log.n_joints), log.rows.iter().map(LogRow::values))
}

pub fn read_log_csv(path: &Path) -> Result<SessionLog> {
    let (header, rows) = read_rows(path)?;
    if header.len() < 13 || (header.len() - 3) % 10 != 0 {
        return Err(format_err(path, format!("{} columns is not a session log", header.len())));
    }
    let n = (header.len() - 3) / 10;
    if header != SessionLog::header(n) {
        return Err(format_err(path, "unexpected session log header"));
    }
    let rows = rows.iter().map(|v| LogRow::from_values(v, n)).collect::<Result<Vec<_>>>()?;
    let dt = if rows.len() > 1 { rows[1].t - rows[0].t } else { 0.0 };
    Ok(SessionLog { n_joints: n, dt, rows })
}

/// Long format: one row per demonstration sample.
pub fn write_demos_csv(path: &Path, demos: &[Demonstration]) -> Result<()> {
    let n = demos.first().map_or(0, |d| d.n_joints());
    let mut header = vec!["demo".to_string(), "t".to_string()];
    for name in ["q", "q_dot", "tau_o"] {
        header.extend((0..n).map(|j| format!("{name}_{j}")));
    }
    let rows = demos.iter().enumerate().flat_map(|(i, d)| {
        (0..d.len()).map(move |k| {
            let mut v = vec![i as f64, k as f64 * d.dt];
            for m in [&d.q, &d.q_dot, &d.tau_o] {
                v.extend(m.row(k).iter());
            }
            v
        })
    });
    write_rows(path, &header, rows)
}

pub fn read_demos_csv(path: &Path) -> Result<Vec<Demonstration>> {
    let (header, rows) = read_rows(path)?;
    if header.len() < 5 || (header.len() - 2) % 3 != 0 {
        return Err(format_err(path, "unexpected demonstration header"));
    }
    let n = (header.len() - 2) / 3;
    let mut groups: Vec<Vec<&Vec<f64>>> = Vec::new();
    for row in &rows {
        let id = row[0] as usize;
        if id == groups.len() {
            groups.push(Vec::new());
        } else if id + 1 != groups.len() {
            return Err(format_err(path, "demonstrations must be stored contiguously in order"));
        }
        groups[id].push(row);
    }
    groups
        .iter()
        .map(|g| {
            let dt = if g.len() > 1 { g[1][1] - g[0][1] } else { 0.0 };
            let block = |off: usize| DMatrix::from_fn(g.len(), n, |k, j| g[k][2 + off * n + j]);
            let d = Demonstration { dt, q: block(0), q_dot: block(1), tau_o: block(2) };
            d.validate().map_err(|e| format_err(path, e))?;
            Ok(d)
        })
        .collect()
}

pub fn write_planner_csv(path: &Path, dt: f64, diagnostics: &[PlannerDiagnostics]) -> Result<()> {
    let header: Vec<String> =
        ["t", "cost", "iterations", "kkt_residual", "active_constraints", "predicted_score"].iter().map(|s| s.to_string()).collect();
    let rows = diagnostics.iter().enumerate().map(|(k, d)| {
        vec![k as f64 * dt, d.cost, d.iterations as f64, d.kkt_residual, d.active_constraints as f64, d.predicted_score]
    });
    write_rows(path, &header, rows)
}
