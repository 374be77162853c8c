use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use mct_core::analysis::{DEFAULT_ALPHA, DEFAULT_HOLDOUT, DEFAULT_RIDGE};
use mct_core::extraction::{ExtractionMethod, PROJECTION_DIM};
use mct_core::forcing::{FORCING_POSITION, MAX_FORCING_SEQUENCES};
use mct_core::{CapturePoint, Family, ModelConfig, TrainHyper};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Version of every file schema written under an output directory.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Desk => "desk",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => bail!("unknown preset '{s}' (expected full or desk)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
}

impl ModelShape {
    pub fn config(&self, vocab: usize, max_len: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_mlp: self.d_mlp,
            max_len,
            vocab,
            seed,
        }
    }
}

impl Default for ModelShape {
    fn default() -> Self {
        let b = ModelConfig::benchmark(6, 0);
        Self {
            n_layers: b.n_layers,
            d_model: b.d_model,
            n_heads: b.n_heads,
            d_mlp: b.d_mlp,
        }
    }
}

/// Optimizer schedule; the shuffle seed is derived per cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub final_lr_frac: f64,
}

impl TrainSchedule {
    pub fn hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            batch_size: self.batch_size,
            epochs: self.epochs,
            grad_clip: self.grad_clip,
            final_lr_frac: self.final_lr_frac,
            seed,
        }
    }
}

impl Default for TrainSchedule {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            lr: h.lr,
            warmup_steps: h.warmup_steps,
            batch_size: h.batch_size,
            epochs: h.epochs,
            grad_clip: h.grad_clip,
            final_lr_frac: h.final_lr_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Layer used for the family summary, true-K baselines and the cluster sweep.
    pub reference_point: CapturePoint,
    /// Layers for the residual k-means layer sweep and belief probes.
    pub layers: Vec<CapturePoint>,
    /// Methods compared at `M = K` on the reference layer.
    pub baseline_methods: Vec<ExtractionMethod>,
    /// Cluster counts for the misspecification sweep.
    pub cluster_counts: Vec<usize>,
    pub sweep_method: ExtractionMethod,
    pub proj_dim: usize,
    pub alpha: f64,
    pub holdout: f64,
    pub ridge_lambda: f64,
    /// Fit clusters on training-sequence activations instead of validation ones.
    pub fit_clusters_on_train: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            reference_point: CapturePoint::ResidPost(1),
            layers: CapturePoint::all(2),
            baseline_methods: vec![
                ExtractionMethod::BeliefKmeans,
                ExtractionMethod::ResidualKmeans,
                ExtractionMethod::PcaKmeans,
                ExtractionMethod::RandprojKmeans,
                ExtractionMethod::TokenBaseline,
                ExtractionMethod::TrueStateOracle,
            ],
            cluster_counts: vec![2, 3, 4, 5, 6, 8, 10],
            sweep_method: ExtractionMethod::ResidualKmeans,
            proj_dim: PROJECTION_DIM,
            alpha: DEFAULT_ALPHA,
            holdout: DEFAULT_HOLDOUT,
            ridge_lambda: DEFAULT_RIDGE,
            fit_clusters_on_train: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingConfig {
    pub enabled: bool,
    pub point: CapturePoint,
    pub position: usize,
    pub max_sequences: usize,
    pub method: ExtractionMethod,
}

impl Default for ForcingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            point: CapturePoint::ResidPost(1),
            position: FORCING_POSITION,
            max_sequences: MAX_FORCING_SEQUENCES,
            method: ExtractionMethod::ResidualKmeans,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub families: Vec<Family>,
    pub seeds: Vec<u64>,
    pub global_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub seq_len: usize,
    pub model: ModelShape,
    pub train: TrainSchedule,
    pub analysis: AnalysisConfig,
    pub forcing: ForcingConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (n_train, n_val) = match preset {
            Preset::Full => (6000, 1500),
            Preset::Desk => (1500, 400),
        };
        Self {
            preset,
            families: Family::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            global_seed: 0,
            n_train,
            n_val,
            seq_len: 64,
            model: ModelShape::default(),
            train: TrainSchedule::default(),
            analysis: AnalysisConfig::default(),
            forcing: ForcingConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.seeds.is_empty() {
            bail!("at least one family and one seed are required");
        }
        if self.n_train == 0 || self.n_val == 0 {
            bail!("sequence counts must be positive");
        }
        if self.seq_len < 3 {
            bail!("sequence length must be at least 3");
        }
        let n_layers = self.model.n_layers;
        let points = self
            .analysis
            .layers
            .iter()
            .chain([&self.analysis.reference_point, &self.forcing.point]);
        for p in points {
            if let CapturePoint::ResidPost(l) = p {
                if *l >= n_layers {
                    bail!("capture point {p} does not exist in a {n_layers}-layer model");
                }
            }
        }
        if self.analysis.cluster_counts.iter().any(|&m| m == 0) {
            bail!("cluster counts must be positive");
        }
        let n_eval = (self.n_val as f64 * self.analysis.holdout).round() as usize;
        if n_eval == 0 || n_eval >= self.n_val {
            bail!("held-out fraction leaves an empty fit or evaluation split");
        }
        Ok(())
    }

    /// Hash of every setting that changes a cell's outputs. Family and seed
    /// lists are excluded so cells are reusable across grid selections.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.families.clear();
        c.seeds.clear();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

pub fn parse_families(s: &str) -> Result<Vec<Family>> {
    if s.trim() == "all" {
        return Ok(Family::ALL.to_vec());
    }
    s.split(',')
        .map(|f| f.trim().parse::<Family>().map_err(|e| anyhow::anyhow!("{e}")))
        .collect()
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|e| anyhow::anyhow!("bad seed '{x}': {e}")))
        .collect()
}
