//! Aggregates per-cell artifacts into summary tables and plot-data files.
//!
//! Means and standard deviations are over seeds (population std, ddof 0)
//! unless a column says otherwise. Rows follow `Family::ALL`, then method,
//! layer, cluster count or condition order, so output is deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use mct_core::extraction::ExtractionMethod;
use mct_core::forcing::Condition;
use mct_core::{CapturePoint, Family};
use serde::{Deserialize, Serialize};

use crate::cell::{CellStatus, SpecSummary, Stage, TrainSummary, PROBE_METHOD};
use crate::config::RunConfig;
use crate::records::{read_csv, read_json, write_csv, ForcingRow, MetricRecord};

pub const TABLES: [&str; 9] = [
    "hmm_families.csv",
    "training.csv",
    "family_summary.csv",
    "truek_baselines.csv",
    "layer_sweep.csv",
    "cluster_sweep.csv",
    "forcing_overall.csv",
    "forcing_by_family.csv",
    "forcing_cells.csv",
];

pub const PLOTS: [&str; 6] = [
    "family_behavior.csv",
    "truek_baselines.csv",
    "layer_sweep.csv",
    "cluster_sweep.csv",
    "forcing_overall.csv",
    "forcing_by_family.csv",
];

/// Mean and population standard deviation; `None` for no values.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Std over all underlying sequences, given per-group means, stds and sizes.
pub fn pooled_std(groups: &[(f64, f64, usize)]) -> Option<f64> {
    let total: usize = groups.iter().map(|g| g.2).sum();
    if total == 0 {
        return None;
    }
    let n = total as f64;
    let mean = groups.iter().map(|&(m, _, k)| m * k as f64).sum::<f64>() / n;
    let second = groups.iter().map(|&(m, s, k)| k as f64 * (s * s + m * m)).sum::<f64>() / n;
    Some((second - mean * mean).max(0.0).sqrt())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HmmFamilyRow {
    pub family: String,
    pub k: usize,
    pub v: usize,
    pub n_seeds: usize,
    pub h_t_mean: f64,
    pub h_t_std: f64,
    pub h_e_mean: f64,
    pub h_e_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub family: String,
    pub seed: u64,
    pub val_loss: f64,
    pub bayes_loss: f64,
    pub excess: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilySummaryRow {
    pub family: String,
    pub n_seeds: usize,
    pub excess_mean: Option<f64>,
    pub excess_std: Option<f64>,
    pub belief_kl_mean: Option<f64>,
    pub belief_kl_std: Option<f64>,
    pub cluster_accuracy_mean: Option<f64>,
    pub cluster_accuracy_std: Option<f64>,
    pub rowwise_kl_mean: Option<f64>,
    pub rowwise_kl_std: Option<f64>,
    pub g01_mean: Option<f64>,
    pub g01_std: Option<f64>,
    pub g12_mean: Option<f64>,
    pub g12_std: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub family: String,
    pub method: String,
    pub m: usize,
    pub n_seeds: usize,
    pub rowwise_kl_mean: Option<f64>,
    pub rowwise_kl_std: Option<f64>,
    pub belief_recon_kl_mean: Option<f64>,
    pub belief_recon_kl_std: Option<f64>,
    pub next_state_nll_mean: Option<f64>,
    pub next_state_nll_std: Option<f64>,
    pub cluster_accuracy_mean: Option<f64>,
    pub cluster_accuracy_std: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub family: String,
    pub layer: String,
    pub n_seeds: usize,
    pub belief_kl_mean: Option<f64>,
    pub belief_kl_std: Option<f64>,
    pub cluster_accuracy_mean: Option<f64>,
    pub cluster_accuracy_std: Option<f64>,
    pub rowwise_kl_mean: Option<f64>,
    pub rowwise_kl_std: Option<f64>,
    pub g01_mean: Option<f64>,
    pub g01_std: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterSweepRow {
    pub family: String,
    pub m: usize,
    pub n_seeds: usize,
    pub belief_recon_kl_mean: Option<f64>,
    pub belief_recon_kl_std: Option<f64>,
    pub next_state_nll_mean: Option<f64>,
    pub next_state_nll_std: Option<f64>,
    pub g01_mean: Option<f64>,
    pub g01_std: Option<f64>,
}

/// Forcing aggregate. `*_std_cells` is the spread over (family, seed,
/// target) cells; `*_std_sequences` pools every patched sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForcingAggRow {
    pub family: String,
    pub condition: String,
    pub n_cells: usize,
    pub n_sequences: usize,
    pub kl_mean: f64,
    pub kl_std_cells: f64,
    pub kl_std_sequences: f64,
    pub improvement_mean: f64,
    pub improvement_std_cells: f64,
    pub improvement_std_sequences: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub x: String,
    pub y: f64,
    pub y_std: f64,
    pub series: String,
}

/// Everything the report reads from the cell directories.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub config: Option<RunConfig>,
    pub config_hash: String,
    pub specs: Vec<SpecSummary>,
    pub training: Vec<(Family, u64, TrainSummary)>,
    pub metrics: Vec<MetricRecord>,
    pub forcing: Vec<ForcingRow>,
}

type Key = (String, String, String, usize, String);

impl Artifacts {
    /// Loads every cell under `root/cells`. Cells must share one config hash.
    pub fn load(root: &Path) -> Result<Self> {
        let cells_dir = root.join("cells");
        if !cells_dir.is_dir() {
            bail!("{} has no cells/ directory; run the benchmark first", root.display());
        }
        let mut dirs: Vec<_> = fs::read_dir(&cells_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut a = Artifacts {
            config: read_json(&root.join("config.json")).ok(),
            ..Artifacts::default()
        };
        let mut hashes: Vec<String> = Vec::new();
        for dir in dirs {
            let Some(status) = CellStatus::load(&dir) else { continue };
            if !status.completed.contains(&Stage::Generate) {
                continue;
            }
            if !hashes.contains(&status.config_hash) {
                hashes.push(status.config_hash.clone());
            }
            let spec: SpecSummary = read_json(&dir.join("spec.json"))?;
            let (family, seed) = (spec.spec.family, spec.spec.seed);
            if status.completed.contains(&Stage::Train) {
                a.training.push((family, seed, read_json(&dir.join("train.json"))?));
            }
            if status.completed.contains(&Stage::Analyze) {
                a.metrics.extend(read_csv::<MetricRecord>(&dir.join("metrics.csv"))?);
            }
            if status.completed.contains(&Stage::Force) {
                a.forcing.extend(read_csv::<ForcingRow>(&dir.join("forcing.csv"))?);
            }
            a.specs.push(spec);
        }
        if a.specs.is_empty() {
            bail!("no completed cells under {}", cells_dir.display());
        }
        if hashes.len() > 1 {
            bail!("cells were produced by different configurations ({}); use a fresh output directory", hashes.join(", "));
        }
        a.config_hash = hashes.remove(0);
        Ok(a)
    }

    fn families(&self) -> Vec<Family> {
        Family::ALL
            .into_iter()
            .filter(|f| self.specs.iter().any(|s| s.spec.family == *f))
            .collect()
    }

    fn k_of(&self, family: Family) -> usize {
        family.dims().0
    }

    fn index(&self) -> BTreeMap<Key, Vec<f64>> {
        let mut map: BTreeMap<Key, Vec<(u64, f64)>> = BTreeMap::new();
        for r in &self.metrics {
            map.entry((r.family.clone(), r.layer.clone(), r.method.clone(), r.m, r.metric.clone()))
                .or_default()
                .push((r.seed, r.value));
        }
        map.into_iter()
            .map(|(k, mut v)| {
                v.sort_by_key(|x| x.0);
                (k, v.into_iter().map(|x| x.1).filter(|x| x.is_finite()).collect())
            })
            .collect()
    }
}

struct Lookup(BTreeMap<Key, Vec<f64>>);

impl Lookup {
    fn stat(&self, family: Family, layer: &str, method: &str, m: usize, metric: &str) -> (Option<f64>, Option<f64>) {
        let key = (family.to_string(), layer.to_string(), method.to_string(), m, metric.to_string());
        match self.0.get(&key).and_then(|v| mean_std(v)) {
            Some((mu, sd)) => (Some(mu), Some(sd)),
            None => (None, None),
        }
    }

    fn count(&self, family: Family, layer: &str, method: &str, m: usize, metric: &str) -> usize {
        let key = (family.to_string(), layer.to_string(), method.to_string(), m, metric.to_string());
        self.0.get(&key).map_or(0, Vec::len)
    }
}

#[derive(Debug, Default)]
pub struct Report {
    pub hmm_families: Vec<HmmFamilyRow>,
    pub training: Vec<TrainingRow>,
    pub family_summary: Vec<FamilySummaryRow>,
    pub truek_baselines: Vec<BaselineRow>,
    pub layer_sweep: Vec<LayerRow>,
    pub cluster_sweep: Vec<ClusterSweepRow>,
    pub forcing_overall: Vec<ForcingAggRow>,
    pub forcing_by_family: Vec<ForcingAggRow>,
    pub forcing_cells: Vec<ForcingRow>,
}

pub fn build_report(a: &Artifacts) -> Report {
    let analysis = a.config.as_ref().map(|c| c.analysis.clone()).unwrap_or_default();
    let reference = analysis.reference_point.to_string();
    let families = a.families();
    let look = Lookup(a.index());
    let mut rep = Report::default();

    for &family in &families {
        let specs: Vec<&SpecSummary> = a.specs.iter().filter(|s| s.spec.family == family).collect();
        let ht: Vec<f64> = specs.iter().map(|s| s.h_t).collect();
        let he: Vec<f64> = specs.iter().map(|s| s.h_e).collect();
        let (ht_m, ht_s) = mean_std(&ht).expect("family has a spec");
        let (he_m, he_s) = mean_std(&he).expect("family has a spec");
        let (k, v) = family.dims();
        rep.hmm_families.push(HmmFamilyRow {
            family: family.to_string(),
            k,
            v,
            n_seeds: specs.len(),
            h_t_mean: ht_m,
            h_t_std: ht_s,
            h_e_mean: he_m,
            h_e_std: he_s,
        });
    }

    let mut training: Vec<&(Family, u64, TrainSummary)> = a.training.iter().collect();
    training.sort_by_key(|(f, s, _)| (Family::ALL.iter().position(|x| x == f), *s));
    rep.training = training
        .iter()
        .map(|(f, s, t)| TrainingRow {
            family: f.to_string(),
            seed: *s,
            val_loss: t.report.val_loss,
            bayes_loss: t.report.bayes_loss,
            excess: t.report.excess,
            steps: t.report.steps,
        })
        .collect();

    let resid = ExtractionMethod::ResidualKmeans.name();
    for &family in &families {
        let k = a.k_of(family);
        let excess: Vec<f64> = a.training.iter().filter(|t| t.0 == family).map(|t| t.2.report.excess).collect();
        let (ex_m, ex_s) = mean_std(&excess).map_or((None, None), |(m, s)| (Some(m), Some(s)));
        let (bk_m, bk_s) = look.stat(family, &reference, PROBE_METHOD, 0, "probe_kl");
        let (ca_m, ca_s) = look.stat(family, &reference, resid, k, "cluster_accuracy");
        let (rk_m, rk_s) = look.stat(family, &reference, resid, k, "rowwise_kl");
        let (g1_m, g1_s) = look.stat(family, &reference, resid, k, "g01");
        let (g2_m, g2_s) = look.stat(family, &reference, resid, k, "g12");
        rep.family_summary.push(FamilySummaryRow {
            family: family.to_string(),
            n_seeds: excess.len().max(look.count(family, &reference, resid, k, "g01")),
            excess_mean: ex_m,
            excess_std: ex_s,
            belief_kl_mean: bk_m,
            belief_kl_std: bk_s,
            cluster_accuracy_mean: ca_m,
            cluster_accuracy_std: ca_s,
            rowwise_kl_mean: rk_m,
            rowwise_kl_std: rk_s,
            g01_mean: g1_m,
            g01_std: g1_s,
            g12_mean: g2_m,
            g12_std: g2_s,
        });
    }

    let mut methods = analysis.baseline_methods.clone();
    methods.sort_by_key(|m| ExtractionMethod::ALL.iter().position(|x| x == m));
    for &family in &families {
        let (k, v) = family.dims();
        for &method in &methods {
            let m = if method == ExtractionMethod::TokenBaseline { v } else { k };
            let name = method.name();
            let n = look.count(family, &reference, name, m, "nll1");
            if n == 0 {
                continue;
            }
            let (rk_m, rk_s) = look.stat(family, &reference, name, m, "rowwise_kl");
            let (br_m, br_s) = look.stat(family, &reference, name, m, "belief_recon_kl");
            let (ns_m, ns_s) = look.stat(family, &reference, name, m, "next_state_nll");
            let (ca_m, ca_s) = look.stat(family, &reference, name, m, "cluster_accuracy");
            rep.truek_baselines.push(BaselineRow {
                family: family.to_string(),
                method: name.to_string(),
                m,
                n_seeds: n,
                rowwise_kl_mean: rk_m,
                rowwise_kl_std: rk_s,
                belief_recon_kl_mean: br_m,
                belief_recon_kl_std: br_s,
                next_state_nll_mean: ns_m,
                next_state_nll_std: ns_s,
                cluster_accuracy_mean: ca_m,
                cluster_accuracy_std: ca_s,
            });
        }
    }

    let mut layers: Vec<CapturePoint> = analysis.layers.clone();
    layers.sort();
    for &family in &families {
        let k = a.k_of(family);
        for point in &layers {
            let layer = point.to_string();
            let n = look.count(family, &layer, PROBE_METHOD, 0, "probe_kl");
            if n == 0 {
                continue;
            }
            let (bk_m, bk_s) = look.stat(family, &layer, PROBE_METHOD, 0, "probe_kl");
            let (ca_m, ca_s) = look.stat(family, &layer, resid, k, "cluster_accuracy");
            let (rk_m, rk_s) = look.stat(family, &layer, resid, k, "rowwise_kl");
            let (g1_m, g1_s) = look.stat(family, &layer, resid, k, "g01");
            rep.layer_sweep.push(LayerRow {
                family: family.to_string(),
                layer,
                n_seeds: n,
                belief_kl_mean: bk_m,
                belief_kl_std: bk_s,
                cluster_accuracy_mean: ca_m,
                cluster_accuracy_std: ca_s,
                rowwise_kl_mean: rk_m,
                rowwise_kl_std: rk_s,
                g01_mean: g1_m,
                g01_std: g1_s,
            });
        }
    }

    let sweep = analysis.sweep_method.name();
    let mut counts = analysis.cluster_counts.clone();
    counts.sort_unstable();
    counts.dedup();
    for &family in &families {
        for &m in &counts {
            let n = look.count(family, &reference, sweep, m, "belief_recon_kl");
            if n == 0 {
                continue;
            }
            let (br_m, br_s) = look.stat(family, &reference, sweep, m, "belief_recon_kl");
            let (ns_m, ns_s) = look.stat(family, &reference, sweep, m, "next_state_nll");
            let (g1_m, g1_s) = look.stat(family, &reference, sweep, m, "g01");
            rep.cluster_sweep.push(ClusterSweepRow {
                family: family.to_string(),
                m,
                n_seeds: n,
                belief_recon_kl_mean: br_m,
                belief_recon_kl_std: br_s,
                next_state_nll_mean: ns_m,
                next_state_nll_std: ns_s,
                g01_mean: g1_m,
                g01_std: g1_s,
            });
        }
    }

    let mut cells = a.forcing.clone();
    cells.sort_by(|x, y| {
        let fx = Family::ALL.iter().position(|f| f.to_string() == x.family);
        let fy = Family::ALL.iter().position(|f| f.to_string() == y.family);
        let cx = Condition::ALL.iter().position(|c| c.to_string() == x.condition);
        let cy = Condition::ALL.iter().position(|c| c.to_string() == y.condition);
        (fx, x.seed, x.target_state, cx).cmp(&(fy, y.seed, y.target_state, cy))
    });
    for c in Condition::ALL {
        let name = c.to_string();
        let rows: Vec<&ForcingRow> = cells.iter().filter(|r| r.condition == name).collect();
        if let Some(row) = aggregate_forcing("all", &name, &rows) {
            rep.forcing_overall.push(row);
        }
    }
    for &family in &families {
        let fname = family.to_string();
        for c in Condition::ALL {
            let name = c.to_string();
            let rows: Vec<&ForcingRow> = cells.iter().filter(|r| r.condition == name && r.family == fname).collect();
            if let Some(row) = aggregate_forcing(&fname, &name, &rows) {
                rep.forcing_by_family.push(row);
            }
        }
    }
    rep.forcing_cells = cells;
    rep
}

fn aggregate_forcing(family: &str, condition: &str, rows: &[&ForcingRow]) -> Option<ForcingAggRow> {
    let kl: Vec<f64> = rows.iter().map(|r| r.kl_mean).collect();
    let imp: Vec<f64> = rows.iter().map(|r| r.improvement_mean).collect();
    let (kl_m, kl_s) = mean_std(&kl)?;
    let (imp_m, imp_s) = mean_std(&imp)?;
    let kl_groups: Vec<_> = rows.iter().map(|r| (r.kl_mean, r.kl_std, r.n_sequences)).collect();
    let imp_groups: Vec<_> = rows.iter().map(|r| (r.improvement_mean, r.improvement_std, r.n_sequences)).collect();
    Some(ForcingAggRow {
        family: family.to_string(),
        condition: condition.to_string(),
        n_cells: rows.len(),
        n_sequences: rows.iter().map(|r| r.n_sequences).sum(),
        kl_mean: kl_m,
        kl_std_cells: kl_s,
        kl_std_sequences: pooled_std(&kl_groups).unwrap_or(0.0),
        improvement_mean: imp_m,
        improvement_std_cells: imp_s,
        improvement_std_sequences: pooled_std(&imp_groups).unwrap_or(0.0),
    })
}

fn plot(rows: &mut Vec<PlotRow>, x: impl ToString, series: impl ToString, mean: Option<f64>, std: Option<f64>) {
    if let Some(y) = mean {
        rows.push(PlotRow {
            x: x.to_string(),
            y,
            y_std: std.unwrap_or(0.0),
            series: series.to_string(),
        });
    }
}

impl Report {
    pub fn plots(&self) -> Vec<(&'static str, Vec<PlotRow>)> {
        let mut family_behavior = Vec::new();
        for r in &self.family_summary {
            plot(&mut family_behavior, &r.family, "rowwise_kl", r.rowwise_kl_mean, r.rowwise_kl_std);
        }
        for r in &self.family_summary {
            plot(&mut family_behavior, &r.family, "g01", r.g01_mean, r.g01_std);
        }
        let mut truek = Vec::new();
        for r in &self.truek_baselines {
            plot(&mut truek, &r.family, format!("{}:rowwise_kl", r.method), r.rowwise_kl_mean, r.rowwise_kl_std);
        }
        let mut layers = Vec::new();
        for r in &self.layer_sweep {
            plot(&mut layers, &r.layer, format!("{}:rowwise_kl", r.family), r.rowwise_kl_mean, r.rowwise_kl_std);
        }
        for r in &self.layer_sweep {
            plot(&mut layers, &r.layer, format!("{}:belief_kl", r.family), r.belief_kl_mean, r.belief_kl_std);
        }
        let mut sweep = Vec::new();
        for r in &self.cluster_sweep {
            plot(&mut sweep, r.m, format!("{}:belief_recon_kl", r.family), r.belief_recon_kl_mean, r.belief_recon_kl_std);
        }
        for r in &self.cluster_sweep {
            plot(&mut sweep, r.m, format!("{}:next_state_nll", r.family), r.next_state_nll_mean, r.next_state_nll_std);
        }
        let mut overall = Vec::new();
        for r in &self.forcing_overall {
            plot(&mut overall, &r.condition, "kl", Some(r.kl_mean), Some(r.kl_std_cells));
        }
        let mut by_family = Vec::new();
        for r in &self.forcing_by_family {
            plot(&mut by_family, &r.family, &r.condition, Some(r.kl_mean), Some(r.kl_std_cells));
        }
        vec![
            ("family_behavior.csv", family_behavior),
            ("truek_baselines.csv", truek),
            ("layer_sweep.csv", layers),
            ("cluster_sweep.csv", sweep),
            ("forcing_overall.csv", overall),
            ("forcing_by_family.csv", by_family),
        ]
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let tables = root.join("tables");
        fs::create_dir_all(tables.join("plots"))?;
        write_table(&tables.join("hmm_families.csv"), &self.hmm_families)?;
        write_table(&tables.join("training.csv"), &self.training)?;
        write_table(&tables.join("family_summary.csv"), &self.family_summary)?;
        write_table(&tables.join("truek_baselines.csv"), &self.truek_baselines)?;
        write_table(&tables.join("layer_sweep.csv"), &self.layer_sweep)?;
        write_table(&tables.join("cluster_sweep.csv"), &self.cluster_sweep)?;
        write_table(&tables.join("forcing_overall.csv"), &self.forcing_overall)?;
        write_table(&tables.join("forcing_by_family.csv"), &self.forcing_by_family)?;
        write_table(&tables.join("forcing_cells.csv"), &self.forcing_cells)?;
        for (name, rows) in self.plots() {
            write_table(&tables.join("plots").join(name), &rows)?;
        }
        Ok(())
    }
}

/// Writes a table, keeping the header even when there are no rows.
fn write_table<T: Serialize + Default>(path: &Path, rows: &[T]) -> Result<()> {
    if rows.is_empty() {
        let header = header_of(&T::default())?;
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        return crate::records::write_csv_with_header::<T>(path, &refs, rows);
    }
    write_csv(path, rows)
}

fn header_of<T: Serialize>(sample: &T) -> Result<Vec<String>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(sample)?;
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    let text = String::from_utf8(bytes)?;
    Ok(text.lines().next().unwrap_or_default().split(',').map(str::to_string).collect())
}

/// Loads the artifacts under `root` and writes `root/tables`.
pub fn report(root: &Path) -> Result<Report> {
    let artifacts = Artifacts::load(root)?;
    let rep = build_report(&artifacts);
    rep.write(root)?;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_is_population() {
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
        assert!(mean_std(&[]).is_none());
    }

    #[test]
    fn pooled_std_matches_flat_computation() {
        let a = [1.0, 2.0, 6.0];
        let b = [0.5, 4.5];
        let ga = mean_std(&a).unwrap();
        let gb = mean_std(&b).unwrap();
        let all: Vec<f64> = a.iter().chain(&b).copied().collect();
        let flat = mean_std(&all).unwrap().1;
        let pooled = pooled_std(&[(ga.0, ga.1, 3), (gb.0, gb.1, 2)]).unwrap();
        assert!((flat - pooled).abs() < 1e-12);
    }

    #[test]
    fn empty_tables_keep_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_table::<PlotRow>(&p, &[]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "x,y,y_std,series\n");
    }
}
