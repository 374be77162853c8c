//! Acceptance checks evaluated against the emitted report tables.
//!
//! Checks read `tables/*.csv`, so an edited table changes the verdict.
//! Exactness checks on the library itself (filtering oracle, gradients,
//! property suites) live in the test suite, not here.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use mct_core::extraction::ExtractionMethod;
use mct_core::forcing::Condition;
use mct_core::Family;
use serde::{Deserialize, Serialize};

use crate::config::{Preset, RunConfig};
use crate::records::{read_csv, read_json, write_csv};
use crate::report::{mean_std, BaselineRow, FamilySummaryRow, ForcingAggRow, HmmFamilyRow, TrainingRow};

/// Reference mean transition entropy, emission entropy and its seed std.
pub fn reference_entropies(family: Family) -> (f64, f64, f64) {
    match family {
        Family::Easy => (0.950, 0.893, 0.136),
        Family::Ambiguous => (0.950, 1.623, 0.053),
        Family::Persistent => (0.719, 1.263, 0.035),
        Family::HighEntropy => (1.386, 1.395, 0.036),
        Family::ThreeState => (0.903, 1.071, 0.098),
        Family::SixState => (0.991, 1.626, 0.023),
    }
}

pub const H_T_TOL: f64 = 0.02;
pub const H_E_STDS: f64 = 3.0;

/// Thresholds that depend on the preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub family_excess: f64,
    /// Grand mean over all runs; only enforced at the full preset.
    pub grand_excess: Option<f64>,
    pub min_improvement: f64,
    pub persistent_g01: f64,
    pub easy_g01: f64,
    pub high_entropy_g01: f64,
}

impl Thresholds {
    pub fn for_preset(preset: Preset) -> Self {
        let base = Self {
            family_excess: 0.06,
            grand_excess: Some(0.04),
            min_improvement: 0.05,
            persistent_g01: 0.03,
            easy_g01: 0.02,
            high_entropy_g01: 0.01,
        };
        match preset {
            Preset::Full => base,
            Preset::Desk => Self {
                family_excess: 0.12,
                grand_excess: None,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u8,
    pub name: String,
    pub measured: Option<f64>,
    pub threshold: String,
    pub pass: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        let measured = self.measured.map_or_else(|| "missing".to_string(), |v| format!("{v:.4}"));
        write!(f, "[{verdict}] {}: {} = {measured} (want {})", self.criterion, self.name, self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub preset: Preset,
    pub checks: Vec<Check>,
}

impl Validation {
    pub fn criteria(&self) -> Vec<u8> {
        let mut c: Vec<u8> = self.checks.iter().map(|c| c.criterion).collect();
        c.dedup();
        c
    }

    pub fn criterion_passes(&self, criterion: u8) -> bool {
        let mut it = self.checks.iter().filter(|c| c.criterion == criterion).peekable();
        it.peek().is_some() && it.all(|c| c.pass)
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn print(&self) {
        println!("validation ({} preset thresholds)", self.preset);
        for c in &self.checks {
            println!("  {c}");
        }
        for criterion in self.criteria() {
            let verdict = if self.criterion_passes(criterion) { "PASS" } else { "FAIL" };
            println!("criterion {criterion}: {verdict}");
        }
    }
}

struct Builder {
    checks: Vec<Check>,
}

impl Builder {
    fn add(&mut self, criterion: u8, name: impl Into<String>, measured: Option<f64>, threshold: impl Into<String>, ok: impl Fn(f64) -> bool) {
        let pass = measured.is_some_and(|v| v.is_finite() && ok(v));
        self.checks.push(Check {
            criterion,
            name: name.into(),
            measured,
            threshold: threshold.into(),
            pass,
        });
    }
}

fn family_of(name: &str) -> Option<Family> {
    name.parse().ok()
}

/// Runs every artifact-level check on `root/tables`.
pub fn validate(root: &Path, preset: Option<Preset>) -> Result<Validation> {
    let preset = match preset {
        Some(p) => p,
        None => {
            read_json::<RunConfig>(&root.join("config.json"))
                .context("no preset given and config.json is unreadable")?
                .preset
        }
    };
    let th = Thresholds::for_preset(preset);
    let tables = root.join("tables");
    let load = |name: &str| tables.join(name);
    let hmm: Vec<HmmFamilyRow> = read_csv(&load("hmm_families.csv"))?;
    let training: Vec<TrainingRow> = read_csv(&load("training.csv"))?;
    let summary: Vec<FamilySummaryRow> = read_csv(&load("family_summary.csv"))?;
    let baselines: Vec<BaselineRow> = read_csv(&load("truek_baselines.csv"))?;
    let forcing: Vec<ForcingAggRow> = read_csv(&load("forcing_overall.csv"))?;

    let mut b = Builder { checks: Vec::new() };

    for row in &hmm {
        let Some(family) = family_of(&row.family) else { continue };
        let (ht, he, he_std) = reference_entropies(family);
        b.add(3, format!("{} H(T)", row.family), Some(row.h_t_mean), format!("{ht:.3} +/- {H_T_TOL}"), |v| {
            (v - ht).abs() <= H_T_TOL
        });
        let band = H_E_STDS * he_std;
        b.add(3, format!("{} H(E)", row.family), Some(row.h_e_mean), format!("{he:.3} +/- {band:.3}"), |v| {
            (v - he).abs() <= band
        });
    }

    for family in Family::ALL {
        let name = family.to_string();
        let ex: Vec<f64> = training.iter().filter(|r| r.family == name).map(|r| r.excess).collect();
        if let Some((m, _)) = mean_std(&ex) {
            b.add(4, format!("{name} mean excess over Bayes"), Some(m), format!("<= {}", th.family_excess), |v| {
                v <= th.family_excess
            });
        }
    }
    if let Some(limit) = th.grand_excess {
        let all: Vec<f64> = training.iter().map(|r| r.excess).collect();
        b.add(4, "grand mean excess over Bayes", mean_std(&all).map(|x| x.0), format!("<= {limit}"), |v| v <= limit);
    }

    let kl = |c: Condition| forcing.iter().find(|r| r.condition == c.to_string()).map(|r| r.kl_mean);
    let recovered = kl(Condition::RecoveredCentroid);
    let improvement = forcing
        .iter()
        .find(|r| r.condition == Condition::RecoveredCentroid.to_string())
        .map(|r| r.improvement_mean);
    let margin = |other: Option<f64>| recovered.zip(other).map(|(r, o)| o - r);
    b.add(5, "unpatched KL minus recovered KL", margin(kl(Condition::Unpatched)), "> 0", |v| v > 0.0);
    b.add(5, "recovered-centroid mean improvement", improvement, format!("> {}", th.min_improvement), |v| {
        v > th.min_improvement
    });
    b.add(5, "wrong-state KL minus recovered KL", margin(kl(Condition::WrongStateCentroid)), "> 0", |v| v > 0.0);
    b.add(5, "mean-activation KL minus recovered KL", margin(kl(Condition::MeanActivation)), "> 0", |v| v > 0.0);

    let g01 = |f: Family| summary.iter().find(|r| r.family == f.to_string()).and_then(|r| r.g01_mean);
    b.add(6, "persistent g01", g01(Family::Persistent), format!(">= {}", th.persistent_g01), |v| {
        v >= th.persistent_g01
    });
    b.add(6, "easy g01", g01(Family::Easy), format!(">= {}", th.easy_g01), |v| v >= th.easy_g01);
    b.add(6, "high_entropy |g01|", g01(Family::HighEntropy), format!("|x| <= {}", th.high_entropy_g01), |v| {
        v.abs() <= th.high_entropy_g01
    });

    let base = |f: &str, m: ExtractionMethod| baselines.iter().find(|r| r.family == f && r.method == m.name());
    let families: Vec<String> = Family::ALL
        .iter()
        .map(|f| f.to_string())
        .filter(|f| baselines.iter().any(|r| &r.family == f))
        .collect();
    let mut wins = 0usize;
    let mut compared = 0usize;
    for f in &families {
        let belief = base(f, ExtractionMethod::BeliefKmeans).and_then(|r| r.rowwise_kl_mean);
        let resid = base(f, ExtractionMethod::ResidualKmeans).and_then(|r| r.rowwise_kl_mean);
        if let (Some(bk), Some(rk)) = (belief, resid) {
            compared += 1;
            if bk <= rk {
                wins += 1;
            }
        }
    }
    let needed = families.len().saturating_sub(1).max(1);
    let measured = (compared == families.len() && compared > 0).then_some(wins as f64);
    b.add(
        7,
        format!("families with belief rowwise KL <= residual (of {})", families.len()),
        measured,
        format!(">= {needed}"),
        |v| v >= needed as f64,
    );
    for f in &families {
        let resid = base(f, ExtractionMethod::ResidualKmeans).and_then(|r| r.belief_recon_kl_mean);
        let rand = base(f, ExtractionMethod::RandprojKmeans).and_then(|r| r.belief_recon_kl_mean);
        b.add(7, format!("{f} randproj minus residual belief-recon KL"), rand.zip(resid).map(|(a, r)| a - r), ">= 0", |v| {
            v >= 0.0
        });
    }

    let v = Validation { preset, checks: b.checks };
    write_csv(&tables.join("validation.csv"), &v.checks)?;
    Ok(v)
}
