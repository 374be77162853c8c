//! State forcing: overwrite the residual stream at one position with a
//! state-specific vector and compare the model's next-token distribution to
//! the exact one-step target `e_i T E`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, MctError, Result};
use crate::extraction::StateAssignment;
use crate::hmm::{forced_state_target, Family, HmmSpec};
use crate::rng::{self, Stream};
use crate::transformer::{softmax_f64, CapturePoint, Model};

pub const FORCING_POSITION: usize = 20;
pub const MAX_FORCING_SEQUENCES: usize = 256;
/// Both distributions are floored at this value and renormalized before KL.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Unpatched,
    RecoveredCentroid,
    TrueStateCentroid,
    MeanActivation,
    RandomActivation,
    ShuffledLabelCentroid,
    WrongStateCentroid,
}

impl Condition {
    pub const ALL: [Condition; 7] = [
        Condition::Unpatched,
        Condition::RecoveredCentroid,
        Condition::TrueStateCentroid,
        Condition::MeanActivation,
        Condition::RandomActivation,
        Condition::ShuffledLabelCentroid,
        Condition::WrongStateCentroid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Unpatched => "unpatched",
            Condition::RecoveredCentroid => "recovered_centroid",
            Condition::TrueStateCentroid => "true_state_centroid",
            Condition::MeanActivation => "mean_activation",
            Condition::RandomActivation => "random_activation",
            Condition::ShuffledLabelCentroid => "shuffled_label_centroid",
            Condition::WrongStateCentroid => "wrong_state_centroid",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = MctError;
    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| param_err(format!("unknown forcing condition '{s}'")))
    }
}

/// Patch vectors for one target state. `None` means no patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub target: usize,
    pub vectors: Vec<(Condition, Option<Vec<f32>>)>,
}

impl ConditionSet {
    pub fn vector(&self, c: Condition) -> Option<&[f32]> {
        self.vectors.iter().find(|(k, _)| *k == c).and_then(|(_, v)| v.as_deref())
    }
}

/// Non-identity permutation of `0..m` (identity only when `m < 2`).
pub fn shuffle_permutation(m: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(rng::derive_seed(seed, "shuffled_label"), Stream::Forcing);
    let identity: Vec<usize> = (0..m).collect();
    let mut perm = identity.clone();
    if m < 2 {
        return perm;
    }
    loop {
        perm.shuffle(&mut rng);
        if perm != identity {
            return perm;
        }
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Builds the patch vectors for every target state `0..K`.
///
/// `acts` are activations at the forcing point (`N x d_model`) and `hidden`
/// the matching true states; together they give the true-state centroids.
pub fn build_conditions(
    assignment: &StateAssignment,
    hidden: &[usize],
    acts: &[f32],
    k: usize,
    seed: u64,
) -> Result<Vec<ConditionSet>> {
    let d = assignment.d_model;
    if assignment.m != k {
        return Err(MctError::Condition(format!("forcing needs M = K ({} != {k})", assignment.m)));
    }
    if assignment.alignment.is_none() {
        return Err(MctError::Condition("assignment has not been aligned".into()));
    }
    if acts.len() != hidden.len() * d {
        return Err(param_err("activations do not match hidden states"));
    }
    let cluster_of = |state: usize| -> Result<usize> {
        let c = assignment
            .cluster_for_state(state)
            .map_err(|e| MctError::Condition(e.to_string()))?;
        if assignment.empty[c] {
            return Err(MctError::Condition(format!("cluster aligned to state {state} is empty")));
        }
        Ok(c)
    };
    let centroid = |c: usize| to_f32(assignment.raw_centroid(c));

    let (true_means, true_empty) = crate::extraction::group_means(acts, d, hidden, k);
    let mut mean = vec![0.0f64; d];
    for c in 0..k {
        for (m, &x) in mean.iter_mut().zip(assignment.raw_centroid(c)) {
            *m += x / k as f64;
        }
    }
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let var = (0..k)
                .map(|c| (assignment.raw_centroid(c)[j] - mean[j]).powi(2))
                .sum::<f64>()
                / k as f64;
            var.sqrt()
        })
        .collect();
    let sigma = shuffle_permutation(k, seed);

    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        if true_empty[i] {
            return Err(MctError::Condition(format!("no positions with true state {i}")));
        }
        let own = cluster_of(i)?;
        let wrong = cluster_of((i + 1) % k)?;
        let mut rng = rng::stream(rng::derive_seed(seed, &format!("random_activation/{i}")), Stream::Forcing);
        let random: Vec<f32> = mean
            .iter()
            .zip(&std)
            .map(|(&mu, &sd)| {
                let draw = if sd > 0.0 {
                    Normal::new(mu, sd).map(|n| n.sample(&mut rng)).unwrap_or(mu)
                } else {
                    mu
                };
                draw as f32
            })
            .collect();
        out.push(ConditionSet {
            target: i,
            vectors: vec![
                (Condition::Unpatched, None),
                (Condition::RecoveredCentroid, Some(centroid(own))),
                (Condition::TrueStateCentroid, Some(to_f32(&true_means[i * d..(i + 1) * d]))),
                (Condition::MeanActivation, Some(to_f32(&mean))),
                (Condition::RandomActivation, Some(random)),
                (Condition::ShuffledLabelCentroid, Some(centroid(sigma[own]))),
                (Condition::WrongStateCentroid, Some(centroid(wrong))),
            ],
        });
    }
    Ok(out)
}

/// `KL(predicted || target)` with both floored at [`PROB_FLOOR`] and renormalized.
pub fn kl_to_target(predicted: &[f64], target: &[f64]) -> f64 {
    let prep = |p: &[f64]| {
        let v: Vec<f64> = p.iter().map(|&x| x.max(PROB_FLOOR)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let (p, q) = (prep(predicted), prep(target));
    p.iter().zip(&q).map(|(&a, &b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingRecord {
    pub family: Family,
    pub seed: u64,
    pub condition: Condition,
    pub target_state: usize,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub improvement_mean: f64,
    pub improvement_std: f64,
    pub n_sequences: usize,
}

/// Sequences to patch with their activations at the forcing point.
#[derive(Debug, Clone, Copy)]
pub struct ForcingInputs<'a> {
    pub tokens: &'a [usize],
    pub n_seq: usize,
    pub seq_len: usize,
    /// `n_seq x seq_len x d_model` activations at `point`.
    pub acts: &'a [f32],
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Patches every sequence at `pos` (clipped to `seq_len - 1`) for each
/// condition and target, reading the next-token distribution at `pos`.
/// Records come back sorted by (target, condition).
pub fn run_forcing(
    model: &Model<f32>,
    spec: &HmmSpec,
    inputs: &ForcingInputs<'_>,
    point: CapturePoint,
    pos: usize,
    conditions: &[ConditionSet],
) -> Result<Vec<ForcingRecord>> {
    let d = model.config().d_model;
    let (n, len) = (inputs.n_seq, inputs.seq_len);
    if n == 0 || len == 0 {
        return Err(param_err("forcing needs at least one sequence"));
    }
    if inputs.acts.len() != n * len * d || inputs.tokens.len() != n * len {
        return Err(param_err("forcing inputs have inconsistent shapes"));
    }
    let pos = pos.min(len - 1);
    // Logits at `pos` only depend on the prefix, so work on `pos + 1` columns.
    let t = pos + 1;
    let mut prefix = Vec::with_capacity(n * t * d);
    for s in 0..n {
        prefix.extend_from_slice(&inputs.acts[s * len * d..(s * len + t) * d]);
    }
    let v = spec.v;
    let next_token = |logits: &[f32], s: usize| -> Vec<f64> {
        let r = (s * t + pos) * v;
        let row: Vec<f64> = logits[r..r + v].iter().map(|&x| f64::from(x)).collect();
        softmax_f64(&row, v)
    };
    let unpatched_logits = model.resume_from(point, &prefix, n, t)?;
    let unpatched: Vec<Vec<f64>> = (0..n).map(|s| next_token(&unpatched_logits, s)).collect();

    let mut records = Vec::new();
    for set in conditions {
        let target = forced_state_target(spec, set.target)?;
        let base: Vec<f64> = unpatched.iter().map(|p| kl_to_target(p, &target)).collect();
        let mut by_condition = Vec::with_capacity(set.vectors.len());
        for (cond, vector) in &set.vectors {
            let kls: Vec<f64> = match vector {
                None => base.clone(),
                Some(vec) => {
                    if vec.len() != d {
                        return Err(param_err(format!("{cond} vector has length {}, expected {d}", vec.len())));
                    }
                    let mut patched = prefix.clone();
                    for s in 0..n {
                        let r = (s * t + pos) * d;
                        patched[r..r + d].copy_from_slice(vec);
                    }
                    let logits = model.resume_from(point, &patched, n, t)?;
                    (0..n).map(|s| kl_to_target(&next_token(&logits, s), &target)).collect()
                }
            };
            let improvement: Vec<f64> = if vector.is_none() {
                vec![0.0; n]
            } else {
                base.iter().zip(&kls).map(|(b, k)| b - k).collect()
            };
            let (kl_mean, kl_std) = mean_std(&kls);
            let (improvement_mean, improvement_std) = mean_std(&improvement);
            by_condition.push(ForcingRecord {
                family: spec.family,
                seed: spec.seed,
                condition: *cond,
                target_state: set.target,
                kl_mean,
                kl_std,
                improvement_mean,
                improvement_std,
                n_sequences: n,
            });
        }
        records.extend(by_condition);
    }
    records.sort_by(|a, b| (a.target_state, a.condition).cmp(&(b.target_state, b.condition)));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{extract_states, ExtractionMethod, StateInputs};
    use crate::hmm::{build_family, sample_sequences};
    use crate::transformer::ModelConfig;

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_to_target(&p, &p), 0.0);
        // uniform vs one-hot over 6 symbols, by hand after flooring
        let u = [1.0f64 / 6.0; 6];
        let mut one = [0.0f64; 6];
        one[0] = 1.0;
        let z = 1.0 + 5.0 * PROB_FLOOR;
        let q: Vec<f64> = one.iter().map(|&x| x.max(PROB_FLOOR) / z).collect();
        let want: f64 = (0..6).map(|j| u[j] * (u[j] / q[j]).ln()).sum();
        assert!((kl_to_target(&u, &one) - want).abs() < 1e-12);
        let closed_form = (z / 6.0).ln() + (5.0 / 6.0) * (1.0 / PROB_FLOOR).ln();
        assert!((want - closed_form).abs() < 1e-9);
    }

    #[test]
    fn shuffled_permutation_is_never_identity() {
        for seed in 0..50 {
            let p = shuffle_permutation(4, seed);
            assert_ne!(p, vec![0, 1, 2, 3]);
            let mut s = p.clone();
            s.sort_unstable();
            assert_eq!(s, vec![0, 1, 2, 3]);
        }
        assert_eq!(shuffle_permutation(1, 0), vec![0]);
        assert_eq!(shuffle_permutation(2, 9), vec![1, 0]);
    }

    fn small_setup() -> (Model<f32>, HmmSpec, Vec<usize>, crate::ActivationCapture, Vec<usize>) {
        let spec = build_family(Family::Easy, 0).unwrap();
        let batch = sample_sequences(&spec, 12, 24, 4).unwrap();
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_mlp: 32,
            max_len: 24,
            vocab: 6,
            seed: 1,
        };
        let model = Model::<f32>::build(cfg).unwrap();
        let (_, cap) = model.forward_with_capture(&batch.tokens, 12, 24).unwrap();
        (model, spec, batch.tokens.clone(), cap, batch.hidden.clone())
    }

    fn aligned_oracle(cap: &crate::ActivationCapture, hidden: &[usize], point: CapturePoint) -> StateAssignment {
        let acts = cap.get(point).unwrap();
        let inputs = StateInputs {
            n_seq: 12,
            seq_len: 24,
            activations: acts,
            d_model: 16,
            beliefs: None,
            k: 4,
            tokens: None,
            vocab: 6,
            hidden: Some(hidden),
        };
        let mut a = extract_states(ExtractionMethod::TrueStateOracle, &inputs, 4, 0).unwrap();
        a.align(hidden, 4).unwrap();
        a
    }

    #[test]
    fn condition_vectors_follow_their_definitions() {
        let (_, _, _, cap, hidden) = small_setup();
        let point = CapturePoint::ResidPost(1);
        let a = aligned_oracle(&cap, &hidden, point);
        let sets = build_conditions(&a, &hidden, cap.get(point).unwrap(), 4, 7).unwrap();
        assert_eq!(sets.len(), 4);
        for set in &sets {
            let i = set.target;
            assert!(set.vector(Condition::Unpatched).is_none());
            let rec = set.vector(Condition::RecoveredCentroid).unwrap();
            // With the oracle, recovered and true-state centroids coincide.
            assert_eq!(rec, set.vector(Condition::TrueStateCentroid).unwrap());
            assert_eq!(set.vector(Condition::WrongStateCentroid).unwrap(), sets[(i + 1) % 4].vector(Condition::RecoveredCentroid).unwrap());
            let mean = set.vector(Condition::MeanActivation).unwrap();
            for j in 0..16 {
                let m: f64 = (0..4).map(|c| a.raw_centroid(c)[j]).sum::<f64>() / 4.0;
                assert!((f64::from(mean[j]) - m).abs() < 1e-5);
            }
        }
        let again = build_conditions(&a, &hidden, cap.get(point).unwrap(), 4, 7).unwrap();
        assert_eq!(sets, again);
        let other = build_conditions(&a, &hidden, cap.get(point).unwrap(), 4, 8).unwrap();
        assert_ne!(sets[0].vector(Condition::RandomActivation), other[0].vector(Condition::RandomActivation));
    }

    #[test]
    fn condition_errors() {
        let (_, _, _, cap, hidden) = small_setup();
        let point = CapturePoint::ResidPost(1);
        let mut a = aligned_oracle(&cap, &hidden, point);
        a.alignment = None;
        assert!(matches!(build_conditions(&a, &hidden, cap.get(point).unwrap(), 4, 0), Err(MctError::Condition(_))));
        let mut a = aligned_oracle(&cap, &hidden, point);
        a.empty[2] = true;
        assert!(matches!(build_conditions(&a, &hidden, cap.get(point).unwrap(), 4, 0), Err(MctError::Condition(_))));
    }

    #[test]
    fn forcing_matches_direct_patching() {
        let (model, spec, tokens, cap, hidden) = small_setup();
        let point = CapturePoint::ResidPost(0);
        let a = aligned_oracle(&cap, &hidden, point);
        let sets = build_conditions(&a, &hidden, cap.get(point).unwrap(), 4, 3).unwrap();
        let inputs = ForcingInputs {
            tokens: &tokens,
            n_seq: 12,
            seq_len: 24,
            acts: cap.get(point).unwrap(),
        };
        let recs = run_forcing(&model, &spec, &inputs, point, 20, &sets).unwrap();
        assert_eq!(recs.len(), 4 * 7);
        for r in &recs {
            if r.condition == Condition::Unpatched {
                assert_eq!((r.improvement_mean, r.improvement_std), (0.0, 0.0));
            }
            assert!(r.kl_mean >= 0.0 && r.n_sequences == 12);
        }
        // Independent check for one cell via the full patched forward pass.
        let set = &sets[1];
        let vec = set.vector(Condition::WrongStateCentroid).unwrap();
        let logits = model.patched_forward(&tokens, 12, 24, point, 20, vec).unwrap();
        let target = forced_state_target(&spec, 1).unwrap();
        let kls: Vec<f64> = (0..12)
            .map(|s| {
                let r = (s * 24 + 20) * 6;
                let row: Vec<f64> = logits[r..r + 6].iter().map(|&x| f64::from(x)).collect();
                kl_to_target(&softmax_f64(&row, 6), &target)
            })
            .collect();
        let want = kls.iter().sum::<f64>() / 12.0;
        let got = recs
            .iter()
            .find(|r| r.target_state == 1 && r.condition == Condition::WrongStateCentroid)
            .unwrap();
        assert!((got.kl_mean - want).abs() < 1e-4, "{} vs {want}", got.kl_mean);
        // Position beyond the sequence is clipped.
        let clipped = run_forcing(&model, &spec, &inputs, point, 99, &sets[..1]).unwrap();
        let last = run_forcing(&model, &spec, &inputs, point, 23, &sets[..1]).unwrap();
        assert_eq!(clipped, last);
    }
}
