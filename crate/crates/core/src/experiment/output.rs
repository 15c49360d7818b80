//! Run directory layout:
//!
//! ```text
//! <run>/manifest.toml   configuration, overrides, data fingerprints
//! <run>/records.csv     one row per training epoch
//! <run>/cells.csv       test accuracy per (seed, regime, method, probe)
//! <run>/hebbian.csv     representation error per pre-training epoch
//! <run>/table.csv       mean and CI per (method, probe, regime)
//! <run>/table.txt       the same as a text table
//! <run>/ckpt/seed-<s>.bin
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::aggregate::{self, ResultRow};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::runner::{self, CellResult, HebbianTrace, PreparedData, RecordRow, SweepOutput};

pub const MANIFEST: &str = "manifest.toml";
pub const RECORDS: &str = "records.csv";
pub const CELLS: &str = "cells.csv";
pub const HEBBIAN: &str = "hebbian.csv";
pub const TABLE_CSV: &str = "table.csv";
pub const TABLE_TXT: &str = "table.txt";
pub const CKPT_DIR: &str = "ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub crate_version: String,
    /// Configuration keys that differ from the defaults.
    pub overrides: Vec<String>,
    pub pool_fingerprint: String,
    pub test_fingerprint: String,
    pub pool_size: usize,
    pub test_size: usize,
    /// Labeled sets were nested across regimes for every seed.
    pub nested_splits: bool,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(run_id: &str, config: &ExperimentConfig, data: &PreparedData, nested_splits: bool) -> Self {
        Manifest {
            run_id: run_id.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            overrides: config.overrides(),
            pool_fingerprint: format!("{:016x}", data.pool.fingerprint()),
            test_fingerprint: format!("{:016x}", data.test.fingerprint()),
            pool_size: data.pool.len(),
            test_size: data.test.len(),
            nested_splits,
            config: config.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), msg: e.to_string() }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| csv_err(path, e))
}

fn write_hebbian(path: &Path, traces: &[HebbianTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["seed", "epoch", "block", "representation_error"]).map_err(|e| csv_err(path, e))?;
    for t in traces {
        for (epoch, row) in t.rows.iter().enumerate() {
            for (block, v) in row.iter().enumerate() {
                w.write_record([t.seed.to_string(), epoch.to_string(), (block + 1).to_string(), format!("{v:?}")])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes every output file of a finished sweep into `dir`.
pub fn write_run(dir: &Path, manifest: &Manifest, out: &SweepOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.save(&dir.join(MANIFEST))?;
    write_csv(&dir.join(RECORDS), &out.records)?;
    write_csv(&dir.join(CELLS), &out.cells)?;
    write_hebbian(&dir.join(HEBBIAN), &out.hebbian)?;
    write_table(dir, &aggregate::aggregate(&out.cells)?)
}

/// Writes `table.csv` and `table.txt` into `dir`.
pub fn write_table(dir: &Path, rows: &[ResultRow]) -> Result<()> {
    write_csv(&dir.join(TABLE_CSV), rows)?;
    let path = dir.join(TABLE_TXT);
    fs::write(&path, aggregate::render_table(rows)).map_err(|e| Error::io(&path, e))
}

/// A finished run read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub cells: Vec<CellResult>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest: Manifest::load(&dir.join(MANIFEST))?,
        cells: read_csv(&dir.join(CELLS))?,
    })
}

pub fn load_records(dir: &Path) -> Result<Vec<RecordRow>> {
    read_csv(&dir.join(RECORDS))
}

/// Runs the sweep and writes it to `<output_dir>/<run_id>`, returning that
/// directory.
pub fn run_to_dir(config: &ExperimentConfig, data: &PreparedData) -> Result<(PathBuf, SweepOutput)> {
    let id = runner::run_id(config);
    let dir = config.output_dir.join(&id);
    let out = runner::run_sweep(config, data, Some(&dir.join(CKPT_DIR)))?;
    write_run(&dir, &Manifest::new(&id, config, data, out.nested), &out)?;
    Ok((dir, out))
}
