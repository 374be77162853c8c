use std::fs;
use std::path::Path;

use mct_bench::config::Preset;
use mct_bench::records::write_csv;
use mct_bench::report::{BaselineRow, FamilySummaryRow, ForcingAggRow, HmmFamilyRow, TrainingRow};
use mct_bench::validate::{reference_entropies, validate};
use mct_core::Family;

fn forcing_row(condition: &str, kl: f64, improvement: f64) -> ForcingAggRow {
    ForcingAggRow {
        family: "all".into(),
        condition: condition.into(),
        n_cells: 72,
        n_sequences: 18432,
        kl_mean: kl,
        improvement_mean: improvement,
        ..ForcingAggRow::default()
    }
}

fn baseline(family: Family, method: &str, rowwise: f64, recon: f64) -> BaselineRow {
    BaselineRow {
        family: family.to_string(),
        method: method.into(),
        m: family.dims().0,
        n_seeds: 3,
        rowwise_kl_mean: Some(rowwise),
        belief_recon_kl_mean: Some(recon),
        ..BaselineRow::default()
    }
}

/// A table set that meets every threshold, with training excess `excess`.
fn write_passing_tables(root: &Path, excess: f64) {
    let tables = root.join("tables");
    fs::create_dir_all(&tables).unwrap();
    let mut hmm = Vec::new();
    let mut training = Vec::new();
    let mut summary = Vec::new();
    let mut baselines = Vec::new();
    for family in Family::ALL {
        let (ht, he, _) = reference_entropies(family);
        let (k, v) = family.dims();
        hmm.push(HmmFamilyRow {
            family: family.to_string(),
            k,
            v,
            n_seeds: 3,
            h_t_mean: ht,
            h_e_mean: he,
            ..HmmFamilyRow::default()
        });
        for seed in 0..3 {
            training.push(TrainingRow {
                family: family.to_string(),
                seed,
                excess,
                ..TrainingRow::default()
            });
        }
        let g01 = match family {
            Family::Persistent => 0.07,
            Family::Easy => 0.05,
            Family::HighEntropy => 0.001,
            _ => 0.02,
        };
        summary.push(FamilySummaryRow {
            family: family.to_string(),
            n_seeds: 3,
            g01_mean: Some(g01),
            ..FamilySummaryRow::default()
        });
        baselines.push(baseline(family, "belief_kmeans", 0.1, 0.1));
        baselines.push(baseline(family, "residual_kmeans", 0.3, 0.4));
        baselines.push(baseline(family, "randproj_kmeans", 0.35, 0.45));
    }
    let forcing = vec![
        forcing_row("unpatched", 0.196, 0.0),
        forcing_row("recovered_centroid", 0.053, 0.143),
        forcing_row("mean_activation", 0.147, 0.049),
        forcing_row("wrong_state_centroid", 0.206, -0.010),
    ];
    write_csv(&tables.join("hmm_families.csv"), &hmm).unwrap();
    write_csv(&tables.join("training.csv"), &training).unwrap();
    write_csv(&tables.join("family_summary.csv"), &summary).unwrap();
    write_csv(&tables.join("truek_baselines.csv"), &baselines).unwrap();
    write_csv(&tables.join("forcing_overall.csv"), &forcing).unwrap();
}

#[test]
fn passing_tables_pass_every_criterion() {
    let dir = tempfile::tempdir().unwrap();
    write_passing_tables(dir.path(), 0.02);
    for preset in [Preset::Desk, Preset::Full] {
        let v = validate(dir.path(), Some(preset)).unwrap();
        assert!(v.all_pass(), "{:#?}", v.checks.iter().filter(|c| !c.pass).collect::<Vec<_>>());
        assert_eq!(v.criteria(), vec![3, 4, 5, 6, 7]);
    }
    assert!(dir.path().join("tables/validation.csv").exists());
}

#[test]
fn tampered_value_fails_its_check() {
    let dir = tempfile::tempdir().unwrap();
    write_passing_tables(dir.path(), 0.02);
    let path = dir.path().join("tables/forcing_overall.csv");
    let text = fs::read_to_string(&path).unwrap();
    let edited = text.replace("recovered_centroid,72,18432,0.053,", "recovered_centroid,72,18432,0.253,");
    assert_ne!(text, edited);
    fs::write(&path, edited).unwrap();
    let v = validate(dir.path(), Some(Preset::Desk)).unwrap();
    assert!(!v.criterion_passes(5));
    for c in [3, 4, 6, 7] {
        assert!(v.criterion_passes(c), "criterion {c}");
    }
    let failing: Vec<&str> = v.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    assert_eq!(
        failing,
        vec!["unpatched KL minus recovered KL", "wrong-state KL minus recovered KL", "mean-activation KL minus recovered KL"]
    );
}

#[test]
fn thresholds_follow_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    write_passing_tables(dir.path(), 0.09);
    assert!(validate(dir.path(), Some(Preset::Desk)).unwrap().criterion_passes(4));
    let full = validate(dir.path(), Some(Preset::Full)).unwrap();
    assert!(!full.criterion_passes(4));
    assert!(full.checks.iter().any(|c| c.name == "grand mean excess over Bayes" && !c.pass));
}

#[test]
fn missing_rows_fail_rather_than_pass() {
    let dir = tempfile::tempdir().unwrap();
    write_passing_tables(dir.path(), 0.02);
    let path = dir.path().join("tables/family_summary.csv");
    let text = fs::read_to_string(&path).unwrap();
    let filtered: String = text.lines().filter(|l| !l.starts_with("persistent")).map(|l| format!("{l}\n")).collect();
    fs::write(&path, filtered).unwrap();
    let v = validate(dir.path(), Some(Preset::Desk)).unwrap();
    let c = v.checks.iter().find(|c| c.name == "persistent g01").unwrap();
    assert!(!c.pass && c.measured.is_none());
}

#[test]
fn preset_comes_from_the_run_config() {
    let dir = tempfile::tempdir().unwrap();
    write_passing_tables(dir.path(), 0.02);
    assert!(validate(dir.path(), None).is_err());
    let cfg = mct_bench::config::RunConfig::preset(Preset::Full);
    mct_bench::records::write_json(&dir.path().join("config.json"), &cfg).unwrap();
    assert_eq!(validate(dir.path(), None).unwrap().preset, Preset::Full);
}
