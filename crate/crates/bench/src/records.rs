use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mct_core::forcing::ForcingRecord;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// One scalar result. `layer` and `method` are plain strings so that
/// training-level rows (`model` / `training`) share the table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub family: String,
    pub seed: u64,
    pub layer: String,
    pub method: String,
    pub m: usize,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForcingRow {
    pub family: String,
    pub seed: u64,
    pub condition: String,
    pub target_state: usize,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub improvement_mean: f64,
    pub improvement_std: f64,
    pub n_sequences: usize,
    pub config_hash: String,
}

impl ForcingRow {
    pub fn from_record(r: &ForcingRecord, config_hash: &str) -> Self {
        Self {
            family: r.family.to_string(),
            seed: r.seed,
            condition: r.condition.to_string(),
            target_state: r.target_state,
            kl_mean: r.kl_mean,
            kl_std: r.kl_std,
            improvement_mean: r.improvement_mean,
            improvement_std: r.improvement_std,
            n_sequences: r.n_sequences,
            config_hash: config_hash.to_string(),
        }
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

/// Header-only CSV for an empty table, keeping the schema visible.
pub fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
        return write_atomic(path, &bytes);
    }
    write_csv(path, rows)
}
