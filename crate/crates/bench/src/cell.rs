//! One (family, seed) cell: generate, train, analyze, force.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::info;
use mct_core::analysis::{
    belief_reconstruction_kl, cluster_accuracy, estimate_transitions, frobenius_error, held_out_probe_kl,
    markov_order_test, next_state_nll, rowwise_kl, AlignedTransitions,
};
use mct_core::array_io::{Array, ArrayData};
use mct_core::extraction::{extract_states_split, extract_states_with, ExtractionMethod, StateAssignment, StateInputs};
use mct_core::forcing::{build_conditions, run_forcing, ForcingInputs};
use mct_core::hmm::{build_family, mean_row_entropy, sample_sequences};
use mct_core::nn::ParamStore;
use mct_core::rng::derive_seed;
use mct_core::{ActivationCapture, CapturePoint, Family, HmmSpec, Model, ModelConfig, SequenceBatch, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::records::{read_json, write_csv, write_json, ForcingRow, MetricRecord};

pub const TRAINING_LAYER: &str = "model";
pub const TRAINING_METHOD: &str = "training";
pub const PROBE_METHOD: &str = "ridge_probe";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub family: Family,
    pub seed: u64,
}

impl CellId {
    pub fn dir_name(&self) -> String {
        format!("{}_s{}", self.family, self.seed)
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join("cells").join(self.dir_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Train,
    Analyze,
    Force,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Generate, Stage::Train, Stage::Analyze, Stage::Force];

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Generate => &[],
            Stage::Train => &[Stage::Generate],
            Stage::Analyze | Stage::Force => &[Stage::Generate, Stage::Train],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub schema_version: u32,
    pub config_hash: String,
    pub completed: Vec<Stage>,
    pub failed: Option<String>,
}

impl CellStatus {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("status.json")
    }

    pub fn load(dir: &Path) -> Option<Self> {
        read_json(&Self::path(dir)).ok()
    }

    pub fn done(&self, stage: Stage, hash: &str) -> bool {
        self.config_hash == hash && self.completed.contains(&stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub h_t: f64,
    pub h_e: f64,
    pub spec: HmmSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub num_params: usize,
    pub seconds: f64,
    pub report: TrainReport,
}

/// Per-cell seeds, all derived from the global seed and cell identity.
#[derive(Debug, Clone, Copy)]
pub struct CellSeeds {
    pub train_data: u64,
    pub val_data: u64,
    pub model: u64,
    pub shuffle: u64,
    pub clustering: u64,
    pub forcing: u64,
}

impl CellSeeds {
    pub fn new(global: u64, id: CellId) -> Self {
        let base = derive_seed(global, &format!("{}/{}", id.family, id.seed));
        Self {
            train_data: derive_seed(base, "train"),
            val_data: derive_seed(base, "val"),
            model: derive_seed(base, "model"),
            shuffle: derive_seed(base, "shuffle"),
            clustering: derive_seed(base, "clustering"),
            forcing: derive_seed(base, "forcing"),
        }
    }
}

/// Runs `stages` (plus missing prerequisites) for one cell. With `resume`,
/// stages already completed under the same config hash are skipped.
pub fn run_cell(cfg: &RunConfig, root: &Path, id: CellId, stages: &[Stage], resume: bool) -> Result<CellStatus> {
    let dir = id.dir(root);
    fs::create_dir_all(&dir)?;
    let hash = cfg.config_hash();
    let mut status = match CellStatus::load(&dir) {
        Some(s) if s.config_hash == hash => s,
        _ => CellStatus {
            schema_version: SCHEMA_VERSION,
            config_hash: hash.clone(),
            ..CellStatus::default()
        },
    };
    status.failed = None;
    let mut plan: Vec<Stage> = Vec::new();
    for &s in stages {
        for &p in s.prerequisites() {
            if !status.done(p, &hash) && !plan.contains(&p) {
                plan.push(p);
            }
        }
        let stale = s.prerequisites().iter().any(|p| plan.contains(p));
        if (stale || !(resume && status.done(s, &hash))) && !plan.contains(&s) {
            plan.push(s);
        }
    }
    plan.sort();
    let mut ctx = CellContext::new(cfg, id, dir.clone());
    for stage in plan {
        let t0 = Instant::now();
        let result = match stage {
            Stage::Generate => ctx.generate(),
            Stage::Train => ctx.train(),
            Stage::Analyze => ctx.analyze(),
            Stage::Force => ctx.force(),
        };
        match result {
            Ok(()) => {
                status.completed.retain(|&s| s != stage);
                status.completed.push(stage);
                status.completed.sort();
                // Anything downstream is stale until it reruns.
                status.completed.retain(|&s| s <= stage || !s.prerequisites().contains(&stage));
                info!("{}: {:?} done in {:.1}s", id.dir_name(), stage, t0.elapsed().as_secs_f64());
                write_json(&CellStatus::path(&dir), &status)?;
            }
            Err(e) => {
                status.failed = Some(format!("{stage:?}: {e:#}"));
                write_json(&CellStatus::path(&dir), &status)?;
                return Err(e.context(format!("{} {:?}", id.dir_name(), stage)));
            }
        }
    }
    Ok(status)
}

struct CellContext<'a> {
    cfg: &'a RunConfig,
    id: CellId,
    dir: PathBuf,
    seeds: CellSeeds,
    hash: String,
    spec: Option<HmmSpec>,
    model: Option<Model<f32>>,
    val: Option<(SequenceBatch, ActivationCapture)>,
}

impl<'a> CellContext<'a> {
    fn new(cfg: &'a RunConfig, id: CellId, dir: PathBuf) -> Self {
        Self {
            cfg,
            id,
            dir,
            seeds: CellSeeds::new(cfg.global_seed, id),
            hash: cfg.config_hash(),
            spec: None,
            model: None,
            val: None,
        }
    }

    fn spec(&mut self) -> Result<&HmmSpec> {
        if self.spec.is_none() {
            let path = self.dir.join("spec.json");
            let spec = if path.exists() {
                read_json::<SpecSummary>(&path)?.spec
            } else {
                build_family(self.id.family, self.id.seed)?
            };
            self.spec = Some(spec);
        }
        Ok(self.spec.as_ref().expect("set above"))
    }

    fn generate(&mut self) -> Result<()> {
        let spec = build_family(self.id.family, self.id.seed)?;
        let summary = SpecSummary {
            schema_version: SCHEMA_VERSION,
            config_hash: self.hash.clone(),
            h_t: mean_row_entropy(spec.t())?,
            h_e: mean_row_entropy(spec.e())?,
            spec: spec.clone(),
        };
        write_json(&self.dir.join("spec.json"), &summary)?;
        self.spec = Some(spec);
        Ok(())
    }

    fn batches(&mut self, n: usize, seed: u64) -> Result<SequenceBatch> {
        let len = self.cfg.seq_len;
        Ok(sample_sequences(self.spec()?, n, len, seed)?)
    }

    fn train(&mut self) -> Result<()> {
        let train = self.batches(self.cfg.n_train, self.seeds.train_data)?;
        let val = self.batches(self.cfg.n_val, self.seeds.val_data)?;
        let v = self.spec()?.v;
        let model_cfg = self.cfg.model.config(v, self.cfg.seq_len, self.seeds.model);
        let mut model = Model::<f32>::build(model_cfg)?;
        let hyper = self.cfg.train.hyper(self.seeds.shuffle);
        let name = self.id.dir_name();
        let t0 = Instant::now();
        let report = model.train_with_progress(&train, &val, &hyper, |epoch, loss| {
            log::debug!("{name}: epoch {epoch} train loss {loss:.4}");
        })?;
        let seconds = t0.elapsed().as_secs_f64();
        info!("{name}: val {:.4} bayes {:.4} excess {:.4}", report.val_loss, report.bayes_loss, report.excess);
        let ckpt = self.dir.join("checkpoint.bin");
        let tmp = ckpt.with_extension("tmp");
        model.params().save(&tmp)?;
        fs::rename(&tmp, &ckpt)?;
        let summary = TrainSummary {
            schema_version: SCHEMA_VERSION,
            config_hash: self.hash.clone(),
            model: model_cfg,
            num_params: model.num_params(),
            seconds,
            report,
        };
        write_json(&self.dir.join("train.json"), &summary)?;
        self.model = Some(model);
        self.val = None;
        Ok(())
    }

    fn model(&mut self) -> Result<&Model<f32>> {
        if self.model.is_none() {
            let summary: TrainSummary = read_json(&self.dir.join("train.json"))?;
            let params = ParamStore::<f32>::load(&self.dir.join("checkpoint.bin")).context("loading checkpoint")?;
            self.model = Some(Model::from_params(summary.model, params)?);
        }
        Ok(self.model.as_ref().expect("set above"))
    }

    fn capture(&mut self, batch: &SequenceBatch) -> Result<ActivationCapture> {
        let model = self.model()?;
        Ok(model.forward_with_capture(&batch.tokens, batch.n, batch.len)?.1)
    }

    fn val_capture(&mut self) -> Result<()> {
        if self.val.is_none() {
            let val = self.batches(self.cfg.n_val, self.seeds.val_data)?;
            let cap = self.capture(&val)?;
            self.val = Some((val, cap));
        }
        Ok(())
    }

    /// Training sequences used as the fit set when clusters are fit on train.
    fn fit_capture(&mut self) -> Result<Option<(SequenceBatch, ActivationCapture)>> {
        if !self.cfg.analysis.fit_clusters_on_train {
            return Ok(None);
        }
        let n = self.cfg.n_val.min(self.cfg.n_train);
        let train = self.batches(self.cfg.n_train, self.seeds.train_data)?.head(n);
        let cap = self.capture(&train)?;
        Ok(Some((train, cap)))
    }

    fn analyze(&mut self) -> Result<()> {
        self.val_capture()?;
        let fit = self.fit_capture()?;
        let spec = self.spec()?.clone();
        let train: TrainSummary = read_json(&self.dir.join("train.json"))?;
        let (val, cap) = self.val.as_ref().expect("captured above");
        let a = &self.cfg.analysis;
        let mut rec = Recorder::new(self.id, &self.hash);

        let r = &train.report;
        for (metric, value) in [
            ("val_loss", r.val_loss),
            ("bayes_loss", r.bayes_loss),
            ("excess", r.excess),
            ("final_train_loss", r.epoch_train_loss.last().copied().unwrap_or(f64::NAN)),
            ("steps", r.steps as f64),
        ] {
            rec.push(TRAINING_LAYER, TRAINING_METHOD, 0, metric, value);
        }

        let k = spec.k;
        let d = cap.d_model;
        let len = val.len;
        for &point in &a.layers {
            let probe = held_out_probe_kl(cap.get(point)?, d, &val.beliefs, k, len, a.holdout, a.ridge_lambda)?;
            rec.push(&point.to_string(), PROBE_METHOD, 0, "probe_kl", probe.kl);
        }

        let mut jobs: Vec<(CapturePoint, ExtractionMethod, usize)> = Vec::new();
        for &point in &a.layers {
            jobs.push((point, ExtractionMethod::ResidualKmeans, k));
        }
        for &method in &a.baseline_methods {
            let m = if method == ExtractionMethod::TokenBaseline { spec.v } else { k };
            jobs.push((a.reference_point, method, m));
        }
        for &m in &a.cluster_counts {
            jobs.push((a.reference_point, a.sweep_method, m));
        }
        jobs.sort();
        jobs.dedup();

        let assign_dir = self.dir.join("assignments");
        fs::create_dir_all(&assign_dir)?;
        for (point, method, m) in jobs {
            let eval_inputs = state_inputs(val, cap, point)?;
            let mut asg = match &fit {
                Some((fb, fc)) => {
                    let fit_inputs = state_inputs(fb, fc, point)?;
                    extract_states_split(method, &fit_inputs, &eval_inputs, m, self.seeds.clustering, a.proj_dim)?
                }
                None => extract_states_with(method, &eval_inputs, m, self.seeds.clustering, a.proj_dim)?,
            };
            let layer = point.to_string();
            let z = &asg.z;
            let order = markov_order_test(z, len, m, a.holdout, a.alpha)?;
            let recon = belief_reconstruction_kl(z, len, m, &val.beliefs, k, a.holdout)?;
            let nsn = next_state_nll(z, &val.hidden, len, m, k, a.holdout, a.alpha)?;
            let mname = method.name();
            rec.push(&layer, mname, m, "nll0", order.nll0);
            rec.push(&layer, mname, m, "nll1", order.nll1);
            rec.push(&layer, mname, m, "nll2", order.nll2);
            rec.push(&layer, mname, m, "g01", order.g01);
            rec.push(&layer, mname, m, "g12", order.g12);
            rec.push(&layer, mname, m, "belief_recon_kl", recon.kl);
            rec.push(&layer, mname, m, "unseen_clusters", recon.unseen_clusters as f64);
            rec.push(&layer, mname, m, "next_state_nll", nsn);
            rec.push(&layer, mname, m, "empty_clusters", asg.empty.iter().filter(|&&e| e).count() as f64);
            if m == k {
                let perm = asg.align(&val.hidden, k)?.to_vec();
                let recovered = estimate_transitions(&asg.z, len, m, a.alpha)?;
                let aligned = AlignedTransitions::new(&recovered, &perm)?;
                rec.push(&layer, mname, m, "cluster_accuracy", cluster_accuracy(&asg.z, &val.hidden, Some(&perm))?);
                rec.push(&layer, mname, m, "rowwise_kl", rowwise_kl(spec.t(), &aligned)?);
                rec.push(&layer, mname, m, "frobenius_error", frobenius_error(spec.t(), aligned.matrix())?);
                if point == a.reference_point {
                    save_assignment(&assign_dir, &layer, &asg, &aligned)?;
                }
            }
        }
        write_csv(&self.dir.join("metrics.csv"), &rec.rows)?;
        Ok(())
    }

    fn force(&mut self) -> Result<()> {
        if !self.cfg.forcing.enabled {
            write_csv::<ForcingRow>(&self.dir.join("forcing.csv"), &[])?;
            return Ok(());
        }
        self.val_capture()?;
        let fit = self.fit_capture()?;
        let spec = self.spec()?.clone();
        let model = self.model()?.clone();
        let (val, cap) = self.val.as_ref().expect("captured above");
        let f = &self.cfg.forcing;
        let point = f.point;
        let eval_inputs = state_inputs(val, cap, point)?;
        let k = spec.k;
        let mut asg = match &fit {
            Some((fb, fc)) => {
                let fit_inputs = state_inputs(fb, fc, point)?;
                extract_states_split(f.method, &fit_inputs, &eval_inputs, k, self.seeds.clustering, self.cfg.analysis.proj_dim)?
            }
            None => extract_states_with(f.method, &eval_inputs, k, self.seeds.clustering, self.cfg.analysis.proj_dim)?,
        };
        asg.align(&val.hidden, k)?;
        // True-state centroids come from the same activations as the recovered ones.
        let (hidden, acts) = match &fit {
            Some((fb, fc)) => (fb.hidden.as_slice(), fc.get(point)?),
            None => (val.hidden.as_slice(), cap.get(point)?),
        };
        let conditions = build_conditions(&asg, hidden, acts, k, self.seeds.forcing)?;
        let n = f.max_sequences.min(val.n);
        let d = cap.d_model;
        let inputs = ForcingInputs {
            tokens: &val.tokens[..n * val.len],
            n_seq: n,
            seq_len: val.len,
            acts: &cap.get(point)?[..n * val.len * d],
        };
        let records = run_forcing(&model, &spec, &inputs, point, f.position, &conditions)?;
        let rows: Vec<ForcingRow> = records.iter().map(|r| ForcingRow::from_record(r, &self.hash)).collect();
        write_csv(&self.dir.join("forcing.csv"), &rows)?;
        Ok(())
    }
}

fn state_inputs<'b>(batch: &'b SequenceBatch, cap: &'b ActivationCapture, point: CapturePoint) -> Result<StateInputs<'b>> {
    Ok(StateInputs {
        n_seq: batch.n,
        seq_len: batch.len,
        activations: cap.get(point)?,
        d_model: cap.d_model,
        beliefs: Some(&batch.beliefs),
        k: batch.k,
        tokens: Some(&batch.tokens),
        vocab: batch.v,
        hidden: Some(&batch.hidden),
    })
}

#[derive(Serialize)]
struct AssignmentHeader<'b> {
    schema_version: u32,
    method: ExtractionMethod,
    m: usize,
    seed: u64,
    layer: &'b str,
    n_seq: usize,
    seq_len: usize,
    centroid_dim: usize,
    d_model: usize,
    empty: &'b [bool],
    alignment: Option<&'b [usize]>,
    aligned_transitions: Vec<Vec<f64>>,
    aligned_occupancy: &'b [u64],
}

fn save_assignment(dir: &Path, layer: &str, asg: &StateAssignment, aligned: &AlignedTransitions) -> Result<()> {
    let stem = format!("{layer}_{}_m{}", asg.method, asg.m);
    let header = AssignmentHeader {
        schema_version: SCHEMA_VERSION,
        method: asg.method,
        m: asg.m,
        seed: asg.seed,
        layer,
        n_seq: asg.n_seq,
        seq_len: asg.seq_len,
        centroid_dim: asg.centroid_dim,
        d_model: asg.d_model,
        empty: &asg.empty,
        alignment: asg.alignment.as_deref(),
        aligned_transitions: aligned.matrix().to_rows(),
        aligned_occupancy: aligned.occupancy(),
    };
    write_json(&dir.join(format!("{stem}.json")), &header)?;
    Array::labels(vec![asg.n_seq, asg.seq_len], &asg.z)?.save(&dir.join(format!("{stem}.z.bin")))?;
    Array::new(vec![asg.m, asg.centroid_dim], ArrayData::F64(asg.centroids.clone()))?
        .save(&dir.join(format!("{stem}.centroids.bin")))?;
    Array::new(vec![asg.m, asg.d_model], ArrayData::F64(asg.raw_centroids.clone()))?
        .save(&dir.join(format!("{stem}.raw_centroids.bin")))?;
    Ok(())
}

struct Recorder {
    id: CellId,
    hash: String,
    rows: Vec<MetricRecord>,
}

impl Recorder {
    fn new(id: CellId, hash: &str) -> Self {
        Self {
            id,
            hash: hash.to_string(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, layer: &str, method: &str, m: usize, metric: &str, value: f64) {
        self.rows.push(MetricRecord {
            family: self.id.family.to_string(),
            seed: self.id.seed,
            layer: layer.to_string(),
            method: method.to_string(),
            m,
            metric: metric.to_string(),
            value,
            config_hash: self.hash.clone(),
        });
    }
}
