//! CSV tables, config snapshot and run manifest.
//!
//! An output directory holds `config.json` (the full config with the run's
//! seed, loadable with `--config`), one CSV per table, `checks.csv`, and
//! `manifest.json` with the config hash, per-file hashes, version and wall
//! time. Everything except the wall time is a function of the config.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::{CliError, RunOutput};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Long-format table: fixed columns, one row per value.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: &str, columns: &[&str]) -> Self {
        Self {
            file: file.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width for {}", self.file);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Rows whose named columns equal the given values.
    pub fn select<'a>(&'a self, filter: &[(&str, &str)]) -> impl Iterator<Item = &'a Vec<String>> + 'a {
        let idx: Vec<(usize, String)> = filter
            .iter()
            .map(|(c, v)| (self.column(c).unwrap_or_else(|| panic!("no column {c}")), v.to_string()))
            .collect();
        self.rows.iter().filter(move |r| idx.iter().all(|(i, v)| &r[*i] == v))
    }

    /// Values of `value` in rows matching the filter.
    pub fn values(&self, filter: &[(&str, &str)]) -> Vec<f64> {
        let v = self.column("value").expect("value column");
        self.select(filter).filter_map(|r| r[v].parse().ok()).collect()
    }

    fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            if let Some(bad) = r.iter().find(|c| matches!(c.as_str(), "NaN" | "inf" | "-inf")) {
                return Err(CliError::Output(format!("{}: non-finite value {bad}", self.file)));
            }
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| CliError::Output(e.to_string()))
    }
}

/// Shortest round-trip formatting of a float.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn int(v: usize) -> String {
    v.to_string()
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    seed: u64,
    version: &'a str,
    config_sha256: String,
    files: Vec<(String, String)>,
    checks_passed: bool,
    wall_time_s: f64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_run(
    dir: &Path,
    experiment: &str,
    cfg: &Config,
    seed: u64,
    out: &RunOutput,
    wall_time_s: f64,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let snapshot = Config { seed, ..cfg.clone() };
    let config = serde_json::to_vec_pretty(&snapshot).map_err(|e| CliError::Output(e.to_string()))?;
    fs::write(dir.join("config.json"), &config)?;

    let mut files = Vec::new();
    let mut checks = Table::new("checks.csv", &["experiment", "seed", "check", "passed", "detail"]);
    for c in &out.checks {
        checks.push(vec![
            experiment.into(),
            seed.to_string(),
            c.name.clone(),
            c.passed.to_string(),
            c.detail.clone(),
        ]);
    }
    for t in out.tables.iter().chain(std::iter::once(&checks)) {
        let bytes = t.to_csv()?;
        fs::write(dir.join(&t.file), &bytes)?;
        files.push((t.file.clone(), sha256_hex(&bytes)));
    }
    let manifest = Manifest {
        experiment,
        seed,
        version: VERSION,
        config_sha256: sha256_hex(&config),
        files,
        checks_passed: out.passed(),
        wall_time_s,
    };
    let m = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Output(e.to_string()))?;
    fs::write(dir.join("manifest.json"), m)?;
    Ok(())
}
