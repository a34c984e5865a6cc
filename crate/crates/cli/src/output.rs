//! CSV emission and parsing, and the run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use sweep_core::crowd::{Table1Row, TABLE1_COLUMNS};
use sweep_core::dynamics::{DynamicsError, PerturbationMap, Sign, Trajectory};
use sweep_core::geometry::ConstraintSet;
use sweep_core::linalg::Vector;
use sweep_core::optimality::ResidualReport;
use sweep_core::shooting::HistoryEntry;
use thiserror::Error;

/// Errors reading an emitted CSV back.
#[derive(Debug, Error)]
pub enum CsvError {
    #[error("empty file")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_row(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

/// Trajectory table: `j,t,x_*,u_*,a_*,eta_*,residual`; cell columns are empty on the last node.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.states[0].len();
    let d = traj.controls.first().map_or(0, |a| a.len());
    let m = traj.eta.first().map_or(0, |e| e.len());
    let mut header = vec!["j".to_string(), "t".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..n).map(|i| format!("u_{i}")));
    header.extend((0..d).map(|i| format!("a_{i}")));
    header.extend((0..m).map(|i| format!("eta_{i}")));
    header.push("residual".into());
    let mut out = String::new();
    push_row(&mut out, &header);
    let k = traj.k();
    for j in 0..=k {
        let mut row = vec![j.to_string(), fmt_f64(traj.times[j])];
        row.extend(traj.states[j].iter().map(|v| fmt_f64(*v)));
        row.extend(traj.shifts[j].iter().map(|v| fmt_f64(*v)));
        if j < k {
            row.extend(traj.controls[j].iter().map(|v| fmt_f64(*v)));
            row.extend(traj.eta[j].iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(traj.residual[j]));
        } else {
            row.extend(std::iter::repeat(String::new()).take(d + m + 1));
        }
        push_row(&mut out, &row);
    }
    out
}

/// Parses a trajectory table and rebuilds the trajectory for the given problem data.
pub fn read_trajectory_csv(text: &str, set: &ConstraintSet, f: &PerturbationMap, sign: Sign) -> Result<Trajectory, CsvError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or(CsvError::Empty)?.split(',').collect();
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let (n, d) = (count("x_"), count("a_"));
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut shifts = Vec::new();
    let mut controls = Vec::new();
    let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    for (idx, line) in rows.iter().enumerate() {
        let lineno = idx + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(CsvError::Malformed { line: lineno, message: format!("expected {} fields, found {}", header.len(), fields.len()) });
        }
        let num = |i: usize| {
            fields[i].parse::<f64>().map_err(|e| CsvError::Malformed { line: lineno, message: format!("column {}: {e}", header[i]) })
        };
        let vec = |start: usize, len: usize| -> Result<Vector, CsvError> { Ok(Vector::from_vec((start..start + len).map(num).collect::<Result<_, _>>()?)) };
        times.push(num(1)?);
        states.push(vec(2, n)?);
        shifts.push(vec(2 + n, n)?);
        if idx + 1 < rows.len() {
            controls.push(vec(2 + 2 * n, d)?);
        }
    }
    Ok(Trajectory::from_states(set, f, times, states, shifts, controls, sign)?)
}

/// Two-column `key,value` table.
pub fn summary_csv(entries: &[(String, String)]) -> String {
    let mut out = String::from("key,value\n");
    for (k, v) in entries {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

/// `tau`, computed columns, printed columns and a match flag.
pub fn table1_csv(rows: &[Table1Row]) -> String {
    let mut header = vec!["tau".to_string()];
    header.extend(TABLE1_COLUMNS.iter().map(|c| c.to_string()));
    header.extend(TABLE1_COLUMNS.iter().map(|c| format!("printed_{c}")));
    header.push("match".into());
    let mut out = String::new();
    push_row(&mut out, &header);
    for r in rows {
        let mut row = vec![fmt_f64(r.tau)];
        row.extend(r.values.iter().map(|v| fmt_f64(*v)));
        match r.printed {
            Some(p) => row.extend(p.iter().map(|s| s.to_string())),
            None => row.extend(std::iter::repeat(String::new()).take(7)),
        }
        row.push(r.matches().to_string());
        push_row(&mut out, &row);
    }
    out
}

/// `condition,residual,tolerance,pass`.
pub fn residuals_csv(report: &ResidualReport) -> String {
    let mut out = String::from("condition,residual,tolerance,pass\n");
    for (name, r) in report.entries() {
        let _ = writeln!(out, "{name},{},{},{}", fmt_f64(r), fmt_f64(report.tol), r <= report.tol);
    }
    out
}

/// `iter,cost,gnorm,horizon`.
pub fn history_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from("iter,cost,gnorm,horizon\n");
    for h in history {
        let _ = writeln!(out, "{},{},{},{}", h.iter, fmt_f64(h.cost), fmt_f64(h.gnorm), fmt_f64(h.horizon));
    }
    out
}

/// Metadata written next to the outputs of every successful run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config: serde_json::Value,
    pub files: Vec<String>,
}

/// Name of the manifest file.
pub const MANIFEST_NAME: &str = "manifest.json";

/// Hex SHA-256 of the configuration text.
pub fn config_hash(source: &str) -> String {
    let digest = Sha256::digest(source.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seconds since the Unix epoch.
pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Files produced by a command, kept in memory until the run has succeeded.
#[derive(Debug, Default)]
pub struct Artifacts {
    files: Vec<(String, String)>,
}

impl Artifacts {
    pub fn add(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Writes every file and then the manifest into `dir`.
    pub fn write(self, dir: &Path, mut manifest: RunManifest) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, contents) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents)?;
            written.push(path);
        }
        manifest.files = self.names();
        manifest.files.push(MANIFEST_NAME.to_string());
        manifest.finished_unix = now_unix();
        let json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, json + "\n")?;
        written.push(path);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 37.94733192202055, f64::MAX, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn hash_is_stable_hex() {
        let h = config_hash("k = 1\n");
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash("k = 1\n"));
        assert_ne!(h, config_hash("k = 2\n"));
    }
}
