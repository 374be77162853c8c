//! Acceptance checks, run by a custom harness so every criterion prints its
//! measurements and one `criterion N ...: PASS|FAIL` line whether or not it
//! passes. The process exits nonzero if any criterion fails.
//!
//! Criteria 4 to 7 share one desk-preset grid, cached under the cargo
//! target tmpdir (override with `MCT_ACCEPTANCE_DIR`) and resumed on later
//! runs. The full-preset training check is skipped by default; run it with
//! `cargo test --test acceptance -- --ignored` (only it) or
//! `-- --include-ignored` (everything).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::OnceLock;

use mct_bench::cell::Stage;
use mct_bench::config::{ModelShape, Preset, RunConfig, TrainSchedule};
use mct_bench::grid::run_grid;
use mct_bench::report::{self, PLOTS, TABLES};
use mct_bench::validate::{self, reference_entropies, Validation, H_E_STDS, H_T_TOL};
use mct_core::analysis::{estimate_transitions, kl_divergence};
use mct_core::extraction::{kmeans, min_cost_assignment};
use mct_core::hmm::{bayes_next_token, build_family, forward_filter, mean_row_entropy, sample_sequences};
use mct_core::{CapturePoint, Family, HmmSpec, Matrix, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn report_line(criterion: u8, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} {name}: {verdict} ({detail})");
}

fn random_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            let r: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(|x| x / s).collect()
        })
        .collect();
    Matrix::from_rows(&data).unwrap()
}

/// Enumerates every hidden path of length `len` and returns, per path, the
/// joint probability of the path and `tokens[..len]`.
fn path_weights(spec: &HmmSpec, tokens: &[usize], len: usize) -> Vec<(Vec<usize>, f64)> {
    let k = spec.k;
    let mut out = Vec::new();
    let total = k.pow(len as u32);
    for code in 0..total {
        let mut path = Vec::with_capacity(len);
        let mut c = code;
        for _ in 0..len {
            path.push(c % k);
            c /= k;
        }
        let mut w = spec.initial[path[0]] * spec.e()[(path[0], tokens[0])];
        for t in 1..len {
            w *= spec.t()[(path[t - 1], path[t])] * spec.e()[(path[t], tokens[t])];
        }
        out.push((path, w));
    }
    out
}

fn criterion_1_exact_inference_oracle() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_err: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(1..=4);
        let v = rng.random_range(2..=4);
        let len = rng.random_range(1..=7);
        let t = random_stochastic(&mut rng, k, k);
        let e = random_stochastic(&mut rng, k, v);
        let pi = random_stochastic(&mut rng, 1, k).row(0).to_vec();
        let spec = HmmSpec::from_parts(Family::Easy, 0, t, e, pi).unwrap();
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
        let beliefs = forward_filter(&spec, &tokens).unwrap();
        for pos in 0..len {
            let paths = path_weights(&spec, &tokens, pos + 1);
            let z: f64 = paths.iter().map(|p| p.1).sum();
            let mut belief = vec![0.0; k];
            let mut next = vec![0.0; v];
            for (path, w) in &paths {
                let s = path[pos];
                belief[s] += w / z;
                for s2 in 0..k {
                    for (y, n) in next.iter_mut().enumerate() {
                        *n += w / z * spec.t()[(s, s2)] * spec.e()[(s2, y)];
                    }
                }
            }
            let got = &beliefs[pos * k..(pos + 1) * k];
            let pred = bayes_next_token(&spec, got);
            for (a, b) in got.iter().zip(&belief).chain(pred.iter().zip(&next)) {
                max_err = max_err.max((a - b).abs());
            }
        }
    }
    let pass = max_err < 1e-10;
    report_line(1, "exact-inference oracle", pass, &format!("max abs error {max_err:.2e} over 200 specs, want < 1e-10"));
    pass
}

fn criterion_2_gradient_check() -> bool {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 1,
        d_mlp: 32,
        max_len: 5,
        vocab: 5,
        seed: 7,
    };
    let mut model = Model::<f64>::build(cfg).unwrap();
    // Move away from the symmetric init so gains, biases and attention all matter.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.5).unwrap();
    for p in model.params_mut().params_mut() {
        for x in p.value.data_mut() {
            *x += noise.sample(&mut rng);
        }
    }
    let (b, t) = (3, 5);
    let tokens: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..cfg.vocab)).collect();
    let (_, grads) = model.loss_and_grads(&tokens, b, t).unwrap();
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let n_params = model.params().len();
    for pi in 0..n_params {
        let len = model.params().params()[pi].value.len();
        let mut numeric = vec![0.0; len];
        for j in 0..len {
            let mut m = model.clone();
            m.params_mut().params_mut()[pi].value.data_mut()[j] += h;
            let lp = m.loss(&tokens, b, t).unwrap();
            m.params_mut().params_mut()[pi].value.data_mut()[j] -= 2.0 * h;
            let lm = m.loss(&tokens, b, t).unwrap();
            numeric[j] = (lp - lm) / (2.0 * h);
        }
        let a = &grads[pi];
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Key biases add the same amount to every score in a row, so both
        // gradients are zero up to rounding and the ratio is meaningless.
        let rel = if scale < 1e-8 { 0.0 } else { diff / scale };
        let name = model.params().params()[pi].name.clone();
        println!("  {name}: relative error {rel:.2e}");
        if rel > worst.0 {
            worst = (rel, name);
        }
    }
    let pass = worst.0 < 1e-3;
    report_line(
        2,
        "gradient check",
        pass,
        &format!("worst relative error {:.2e} on {} across {n_params} tensors, want < 1e-3", worst.0, worst.1),
    );
    pass
}

fn criterion_3_family_calibration() -> bool {
    let mut pass = true;
    for family in Family::ALL {
        let (ht_ref, he_ref, he_std) = reference_entropies(family);
        let specs: Vec<HmmSpec> = (0..3).map(|s| build_family(family, s).unwrap()).collect();
        let ht: Vec<f64> = specs.iter().map(|s| mean_row_entropy(s.t()).unwrap()).collect();
        let he: Vec<f64> = specs.iter().map(|s| mean_row_entropy(s.e()).unwrap()).collect();
        let ht_mean = ht.iter().sum::<f64>() / 3.0;
        let he_mean = he.iter().sum::<f64>() / 3.0;
        let ht_ok = ht.iter().all(|h| (h - ht_ref).abs() <= H_T_TOL);
        let he_ok = (he_mean - he_ref).abs() <= H_E_STDS * he_std;
        println!(
            "  {family}: H(T) {ht_mean:.3} (want {ht_ref:.3} +/- {H_T_TOL}) {}; H(E) {he_mean:.3} per seed {:.3?} (want {he_ref:.3} +/- {:.3}) {}",
            if ht_ok { "ok" } else { "FAIL" },
            he,
            H_E_STDS * he_std,
            if he_ok { "ok" } else { "FAIL" },
        );
        pass &= ht_ok && he_ok;
    }
    report_line(3, "family calibration", pass, "H(T) per seed within 0.02, seed-mean H(E) within 3 reference stds");
    pass
}

static DESK: OnceLock<Validation> = OnceLock::new();

fn acceptance_dir(preset: Preset) -> PathBuf {
    let base = std::env::var_os("MCT_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")));
    base.join(format!("acceptance-{preset}"))
}

fn run_preset(preset: Preset) -> Validation {
    let root = acceptance_dir(preset);
    let cfg = RunConfig::preset(preset);
    let manifest = run_grid(&cfg, &root, &Stage::ALL, 1, true).expect("grid runs");
    for c in manifest.failed() {
        println!("  cell {}_s{} failed: {}", c.family, c.seed, c.failed.as_deref().unwrap_or(""));
    }
    report::report(&root).expect("report");
    validate::validate(&root, Some(preset)).expect("validate")
}

fn desk() -> &'static Validation {
    DESK.get_or_init(|| run_preset(Preset::Desk))
}

fn check_criterion(v: &Validation, criterion: u8, name: &str) -> bool {
    for c in v.checks.iter().filter(|c| c.criterion == criterion) {
        println!("  {c}");
    }
    let pass = v.criterion_passes(criterion);
    let n = v.checks.iter().filter(|c| c.criterion == criterion).count();
    report_line(criterion, name, pass, &format!("{} preset, {n} checks", v.preset));
    pass
}

fn criterion_4_near_bayes_training_desk() -> bool {
    check_criterion(desk(), 4, "near-Bayes training")
}

fn criterion_4_near_bayes_training_full() -> bool {
    let v = run_preset(Preset::Full);
    check_criterion(&v, 4, "near-Bayes training")
}

fn criterion_5_forcing_ordering() -> bool {
    check_criterion(desk(), 5, "forcing ordering")
}

fn criterion_6_markov_order_signal() -> bool {
    check_criterion(desk(), 6, "Markov-order signal")
}

fn criterion_7_baseline_ordering() -> bool {
    check_criterion(desk(), 7, "baseline ordering")
}

fn blob_recovery() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let (d, per, m) = (5, 60, 4);
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for c in 0..m {
        for _ in 0..per {
            for j in 0..d {
                let center = if j == c { 10.0 } else { 0.0 };
                points.push(center + noise.sample(&mut rng));
            }
            truth.push(c);
        }
    }
    let res = kmeans(&points, d, m, 5).unwrap();
    // Each true blob maps to exactly one cluster and vice versa.
    let mut map = vec![None; m];
    for (&z, &s) in res.labels.iter().zip(&truth) {
        match map[s] {
            None => map[s] = Some(z),
            Some(prev) if prev != z => return false,
            _ => {}
        }
    }
    let mut used: Vec<usize> = map.iter().map(|x| x.unwrap()).collect();
    used.sort_unstable();
    used.dedup();
    used.len() == m
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn hungarian_matches_brute_force() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let perms = permutations(6);
    assert_eq!(perms.len(), 720);
    (0..200).all(|_| {
        let table: Vec<Vec<i64>> = (0..6).map(|_| (0..6).map(|_| rng.random_range(0..50)).collect()).collect();
        let cost: Vec<Vec<i64>> = table.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
        let a = min_cost_assignment(&cost);
        let mut seen = a.clone();
        seen.sort_unstable();
        let got: i64 = a.iter().enumerate().map(|(i, &j)| table[i][j]).sum();
        let best = perms.iter().map(|p| p.iter().enumerate().map(|(i, &j)| table[i][j]).sum::<i64>()).max().unwrap();
        seen == (0..6).collect::<Vec<_>>() && got == best
    })
}

fn kl_properties() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    (0..500).all(|_| {
        let n = rng.random_range(2..8);
        let p = random_stochastic(&mut rng, 1, n).row(0).to_vec();
        let q = random_stochastic(&mut rng, 1, n).row(0).to_vec();
        kl_divergence(&p, &q) >= 0.0 && kl_divergence(&p, &p).abs() < 1e-14 && (p != q) == (kl_divergence(&p, &q) > 0.0)
    })
}

fn small_model() -> Model<f32> {
    Model::<f32>::build(ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_mlp: 64,
        max_len: 16,
        vocab: 6,
        seed: 21,
    })
    .unwrap()
}

fn causality() -> bool {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (b, t, v) = (4, 16, 6);
    let tokens: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..6)).collect();
    let base = model.forward(&tokens, b, t).unwrap();
    (0..t).all(|j| {
        let mut pert = tokens.clone();
        for s in 0..b {
            pert[s * t + j] = (pert[s * t + j] + 1 + s) % 6;
        }
        let out = model.forward(&pert, b, t).unwrap();
        (0..b).all(|s| base[(s * t) * v..(s * t + j) * v] == out[(s * t) * v..(s * t + j) * v])
    })
}

fn identity_patch_is_noop() -> bool {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (b, t) = (3, 16);
    let tokens: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..6)).collect();
    let (logits, cap) = model.forward_with_capture(&tokens, b, t).unwrap();
    CapturePoint::all(2).into_iter().all(|point| {
        // Same vector for every sequence, so patch each sequence on its own.
        (0..b).all(|s| {
            let pos = 9;
            let own = cap.vector(point, s, pos).unwrap().to_vec();
            let toks = &tokens[s * t..(s + 1) * t];
            let out = model.patched_forward(toks, 1, t, point, pos, &own).unwrap();
            let want = &logits[s * t * 6..(s + 1) * t * 6];
            out.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-5 * (1.0 + b.abs()))
        })
    })
}

fn transitions_are_consistent() -> bool {
    let spec = build_family(Family::Persistent, 0).unwrap();
    let batch = sample_sequences(&spec, 400, 64, 9).unwrap();
    let rec = estimate_transitions(&batch.hidden, 64, spec.k, 1e-3).unwrap();
    let err = (0..spec.k)
        .flat_map(|i| (0..spec.k).map(move |j| (i, j)))
        .map(|(i, j)| (rec.matrix[(i, j)] - spec.t()[(i, j)]).abs())
        .fold(0.0f64, f64::max);
    println!("  estimate_transitions max abs error on 25200 sampled transitions: {err:.4}");
    err < 0.02
}

fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.families = vec![Family::ThreeState];
    cfg.seeds = vec![1];
    cfg.n_train = 40;
    cfg.n_val = 20;
    cfg.seq_len = 24;
    cfg.model = ModelShape {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_mlp: 32,
    };
    cfg.train = TrainSchedule {
        lr: 3e-3,
        warmup_steps: 2,
        batch_size: 8,
        epochs: 2,
        grad_clip: 1.0,
        final_lr_frac: 1.0,
    };
    cfg.forcing.max_sequences = 8;
    cfg
}

fn pipeline_is_deterministic() -> bool {
    let cfg = tiny_run_config();
    let runs: Vec<Vec<Vec<u8>>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            run_grid(&cfg, dir.path(), &Stage::ALL, 1, false).unwrap();
            report::report(dir.path()).unwrap();
            let tables = dir.path().join("tables");
            let cell = dir.path().join("cells/three_state_s1");
            TABLES
                .iter()
                .map(|n| tables.join(n))
                .chain(PLOTS.iter().map(|n| tables.join("plots").join(n)))
                .chain(["metrics.csv", "forcing.csv", "checkpoint.bin"].iter().map(|n| cell.join(n)))
                .map(|p| fs::read(p).unwrap())
                .collect()
        })
        .collect();
    runs[0] == runs[1]
}

fn criterion_8_property_suites() -> bool {
    let checks: [(&str, fn() -> bool); 7] = [
        ("k-means blob recovery", blob_recovery),
        ("Hungarian equals brute force on 200 6x6 tables", hungarian_matches_brute_force),
        ("KL nonnegative, zero exactly on equal inputs", kl_properties),
        ("transformer causality", causality),
        ("identity patch is a no-op", identity_patch_is_noop),
        ("transition estimates match sampled chains", transitions_are_consistent),
        ("pipeline determinism under a fixed seed", pipeline_is_deterministic),
    ];
    let mut pass = true;
    for (name, f) in checks {
        let ok = f();
        println!("  {name}: {}", if ok { "ok" } else { "FAIL" });
        pass &= ok;
    }
    report_line(8, "property suites", pass, "7 suites");
    pass
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let has = |flag: &str| args.iter().any(|a| a == flag);
    let (regular, full) = match (has("--ignored"), has("--include-ignored")) {
        (true, _) => (false, true),
        (false, include) => (true, include),
    };
    let mut criteria: Vec<fn() -> bool> = Vec::new();
    if regular {
        criteria.extend([
            criterion_1_exact_inference_oracle as fn() -> bool,
            criterion_2_gradient_check,
            criterion_3_family_calibration,
            criterion_4_near_bayes_training_desk,
            criterion_5_forcing_ordering,
            criterion_6_markov_order_signal,
            criterion_7_baseline_ordering,
            criterion_8_property_suites,
        ]);
    }
    if full {
        criteria.push(criterion_4_near_bayes_training_full);
    }
    let failed = criteria.into_iter().map(|f| f()).filter(|ok| !ok).count();
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
