//! Reproducible experiment drivers. Each one is a pure function of its
//! configuration and writes CSV tables, PNG figures and a `report.json`.

pub mod ablation;
pub mod coverage;
pub mod losshist;
pub mod pipeline;
pub mod plot;
pub mod points;
pub mod samples;
pub mod toy2d;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::Result;

/// Summary of one experiment run.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    pub files: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

impl ExperimentReport {
    pub fn new<C: Serialize>(name: &str, config: &C) -> Self {
        Self {
            name: name.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            metrics: BTreeMap::new(),
            files: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn metric(&mut self, key: &str, v: f64) {
        self.metrics.insert(key.to_string(), v);
    }

    /// Record the elapsed time and write `report.json` into `dir`.
    pub fn finish(&mut self, dir: &Path, started: Instant) -> Result<()> {
        self.wall_clock_s = started.elapsed().as_secs_f64();
        let p = dir.join("report.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)?)?;
        self.files.push(p);
        Ok(())
    }
}

/// Write a CSV file from a header and pre-formatted rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s += &r.join(",");
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Mean and half-range of a set of values.
pub fn mean_spread(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, (hi - lo) / 2.0)
}
