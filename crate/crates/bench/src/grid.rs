//! Runs stages over every (family, seed) cell and records a manifest.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Result;
use log::{error, info};
use mct_core::Family;
use serde::{Deserialize, Serialize};

use crate::cell::{run_cell, CellId, CellStatus, Stage};
use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::records::{read_json, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub family: Family,
    pub seed: u64,
    pub completed: Vec<Stage>,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub cells: Vec<CellEntry>,
}

impl Manifest {
    pub fn path(root: &Path) -> std::path::PathBuf {
        root.join("manifest.json")
    }

    pub fn load(root: &Path) -> Result<Self> {
        read_json(&Self::path(root))
    }

    pub fn failed(&self) -> impl Iterator<Item = &CellEntry> {
        self.cells.iter().filter(|c| c.failed.is_some())
    }
}

pub fn cells(cfg: &RunConfig) -> Vec<CellId> {
    let mut out = Vec::new();
    for &family in &cfg.families {
        for &seed in &cfg.seeds {
            out.push(CellId { family, seed });
        }
    }
    out
}

/// Runs `stages` on every cell with `workers` threads. A failing cell is
/// logged and recorded; the rest of the grid still runs.
pub fn run_grid(cfg: &RunConfig, root: &Path, stages: &[Stage], workers: usize, resume: bool) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(root.join("cells"))?;
    write_json(&root.join("config.json"), cfg)?;
    let ids = cells(cfg);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellStatus>>> = Mutex::new(vec![None; ids.len()]);
    let workers = workers.clamp(1, ids.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&id) = ids.get(i) else { break };
                info!("cell {} ({}/{})", id.dir_name(), i + 1, ids.len());
                let status = match run_cell(cfg, root, id, stages, resume) {
                    Ok(s) => s,
                    Err(e) => {
                        error!("{e:#}");
                        CellStatus::load(&id.dir(root)).unwrap_or_else(|| CellStatus {
                            schema_version: SCHEMA_VERSION,
                            config_hash: cfg.config_hash(),
                            completed: Vec::new(),
                            failed: Some(format!("{e:#}")),
                        })
                    }
                };
                results.lock().expect("no worker panicked")[i] = Some(status);
            });
        }
    });
    let results = results.into_inner().expect("no worker panicked");
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.config_hash(),
        config: cfg.clone(),
        cells: ids
            .iter()
            .zip(results)
            .map(|(id, s)| {
                let s = s.expect("every cell reports");
                CellEntry {
                    family: id.family,
                    seed: id.seed,
                    completed: s.completed,
                    failed: s.failed,
                }
            })
            .collect(),
    };
    write_json(&Manifest::path(root), &manifest)?;
    Ok(manifest)
}
