//! Evaluation battery over extracted states: transition recovery, Markov-order
//! testing, ridge belief probes and cluster-quality metrics.
//!
//! Label arrays are sequence-major with a fixed `seq_len`. Every held-out
//! metric splits by sequence: the first `n - n_eval` sequences fit, the last
//! `n_eval` evaluate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, MctError, Result};
use crate::matrix::Matrix;
use crate::nn::gemm;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_HOLDOUT: f64 = 0.2;
pub const DEFAULT_RIDGE: f64 = 1.0;
/// Probe outputs are clipped to `[PROBE_FLOOR, 1]` before renormalizing.
pub const PROBE_FLOOR: f64 = 1e-6;
/// Floor applied to the second argument of [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

/// `KL(p || q)`; zero-mass terms of `p` contribute nothing and `q` is floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b.max(KL_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Number of (fit, eval) sequences for a held-out fraction.
pub fn split_sequences(n_seq: usize, holdout: f64) -> Result<(usize, usize)> {
    if !(0.0..1.0).contains(&holdout) {
        return Err(param_err(format!("held-out fraction {holdout} outside [0, 1)")));
    }
    let n_eval = (n_seq as f64 * holdout).round() as usize;
    if n_eval == 0 {
        return Err(param_err(format!("held-out set is empty ({n_seq} sequences, fraction {holdout})")));
    }
    if n_eval >= n_seq {
        return Err(param_err("fit set is empty"));
    }
    Ok((n_seq - n_eval, n_eval))
}

fn n_sequences(len: usize, seq_len: usize) -> Result<usize> {
    if seq_len == 0 || len % seq_len != 0 {
        return Err(param_err(format!("{len} labels do not split into sequences of {seq_len}")));
    }
    Ok(len / seq_len)
}

fn check_range(labels: &[usize], m: usize, what: &str) -> Result<()> {
    match labels.iter().find(|&&x| x >= m) {
        Some(bad) => Err(param_err(format!("{what} label {bad} outside 0..{m}"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredTransitions {
    pub matrix: Matrix,
    /// Outgoing transition counts per row.
    pub occupancy: Vec<u64>,
    pub alpha: f64,
}

impl RecoveredTransitions {
    pub fn m(&self) -> usize {
        self.matrix.rows()
    }

    /// Rows with no observed outgoing transition.
    pub fn empty_rows(&self) -> Vec<bool> {
        self.occupancy.iter().map(|&c| c == 0).collect()
    }
}

/// Smoothed first-order transition frequencies, counted within sequences only.
pub fn estimate_transitions(z: &[usize], seq_len: usize, m: usize, alpha: f64) -> Result<RecoveredTransitions> {
    n_sequences(z.len(), seq_len)?;
    check_range(z, m, "state")?;
    if m == 0 || !(alpha > 0.0) {
        return Err(param_err("estimate_transitions needs M > 0 and alpha > 0"));
    }
    let mut counts = vec![0u64; m * m];
    for seq in z.chunks(seq_len) {
        for w in seq.windows(2) {
            counts[w[0] * m + w[1]] += 1;
        }
    }
    let occupancy: Vec<u64> = counts.chunks(m).map(|r| r.iter().sum()).collect();
    let mut data = Vec::with_capacity(m * m);
    for (row, &occ) in counts.chunks(m).zip(&occupancy) {
        let denom = occ as f64 + alpha * m as f64;
        data.extend(row.iter().map(|&c| (c as f64 + alpha) / denom));
    }
    Ok(RecoveredTransitions {
        matrix: Matrix::from_vec(m, m, data)?,
        occupancy,
        alpha,
    })
}

/// Recovered transitions re-indexed by true state through a Hungarian alignment.
/// Only constructible from an alignment, so comparisons against `T` cannot
/// silently use cluster order.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTransitions {
    matrix: Matrix,
    occupancy: Vec<u64>,
}

impl AlignedTransitions {
    /// `alignment[c]` is the true state matched to cluster `c`.
    pub fn new(recovered: &RecoveredTransitions, alignment: &[usize]) -> Result<Self> {
        let m = recovered.m();
        let mut seen = vec![false; m];
        if alignment.len() != m || alignment.iter().any(|&s| s >= m || std::mem::replace(&mut seen[s], true)) {
            return Err(param_err("alignment is not a permutation of the recovered states"));
        }
        let mut matrix = Matrix::zeros(m, m);
        let mut occupancy = vec![0; m];
        for a in 0..m {
            occupancy[alignment[a]] = recovered.occupancy[a];
            for b in 0..m {
                matrix[(alignment[a], alignment[b])] = recovered.matrix[(a, b)];
            }
        }
        Ok(Self { matrix, occupancy })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn occupancy(&self) -> &[u64] {
        &self.occupancy
    }
}

/// Occupancy-weighted mean of `KL(T[i] || T_hat[i])`; empty rows are excluded.
pub fn rowwise_kl(t_true: &Matrix, t_hat: &AlignedTransitions) -> Result<f64> {
    if t_true.shape() != t_hat.matrix.shape() {
        return Err(MctError::Shape {
            op: "rowwise_kl",
            left: vec![t_true.rows(), t_true.cols()],
            right: vec![t_hat.matrix.rows(), t_hat.matrix.cols()],
        });
    }
    let total: u64 = t_hat.occupancy.iter().sum();
    if total == 0 {
        return Err(param_err("no observed transitions to weight rows by"));
    }
    let kl: f64 = (0..t_true.rows())
        .filter(|&i| t_hat.occupancy[i] > 0)
        .map(|i| t_hat.occupancy[i] as f64 * kl_divergence(t_true.row(i), t_hat.matrix.row(i)))
        .sum();
    Ok(kl / total as f64)
}

/// Entrywise Euclidean distance between two matrices of equal shape.
pub fn frobenius_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MctError::Shape {
            op: "frobenius_error",
            left: vec![a.rows(), a.cols()],
            right: vec![b.rows(), b.cols()],
        });
    }
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderTestResult {
    pub nll0: f64,
    pub nll1: f64,
    pub nll2: f64,
    pub g01: f64,
    pub g12: f64,
    /// Held-out predictions scored per order.
    pub n_eval: usize,
}

/// Held-out NLL of order-0/1/2 smoothed categorical models over `z`.
///
/// All three orders score the same targets (`t >= 2` in each held-out
/// sequence) so the gains compare like with like.
pub fn markov_order_test(z: &[usize], seq_len: usize, m: usize, holdout: f64, alpha: f64) -> Result<OrderTestResult> {
    let n = n_sequences(z.len(), seq_len)?;
    check_range(z, m, "state")?;
    if seq_len < 3 {
        return Err(param_err("order-2 test needs sequences of length >= 3"));
    }
    if m == 0 || !(alpha > 0.0) {
        return Err(param_err("markov_order_test needs M > 0 and alpha > 0"));
    }
    let (n_fit, _) = split_sequences(n, holdout)?;
    let (fit, eval) = z.split_at(n_fit * seq_len);

    let mut c0 = vec![0u64; m];
    let mut c1 = vec![0u64; m * m];
    let mut c2 = vec![0u64; m * m * m];
    for seq in fit.chunks(seq_len) {
        for &x in seq {
            c0[x] += 1;
        }
        for w in seq.windows(2) {
            c1[w[0] * m + w[1]] += 1;
        }
        for w in seq.windows(3) {
            c2[(w[0] * m + w[1]) * m + w[2]] += 1;
        }
    }
    let mf = m as f64;
    let total0: u64 = c0.iter().sum();
    let row1: Vec<u64> = c1.chunks(m).map(|r| r.iter().sum()).collect();
    let row2: Vec<u64> = c2.chunks(m).map(|r| r.iter().sum()).collect();

    let (mut nll0, mut nll1, mut nll2, mut count) = (0.0, 0.0, 0.0, 0usize);
    for seq in eval.chunks(seq_len) {
        for w in seq.windows(3) {
            let (a, b, c) = (w[0], w[1], w[2]);
            nll0 -= ((c0[c] as f64 + alpha) / (total0 as f64 + alpha * mf)).ln();
            nll1 -= ((c1[b * m + c] as f64 + alpha) / (row1[b] as f64 + alpha * mf)).ln();
            let ctx = a * m + b;
            nll2 -= ((c2[ctx * m + c] as f64 + alpha) / (row2[ctx] as f64 + alpha * mf)).ln();
            count += 1;
        }
    }
    let cf = count as f64;
    let (nll0, nll1, nll2) = (nll0 / cf, nll1 / cf, nll2 / cf);
    Ok(OrderTestResult {
        nll0,
        nll1,
        nll2,
        g01: nll0 - nll1,
        g12: nll1 - nll2,
        n_eval: count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// `d_model x K`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub lambda: f64,
}

impl ProbeModel {
    /// Raw linear prediction for one activation row.
    pub fn predict_raw(&self, x: &[f32]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            let xi = f64::from(xi);
            for (o, &w) in out.iter_mut().zip(self.weights.row(i)) {
                *o += xi * w;
            }
        }
        out
    }

    /// Prediction clipped to `[PROBE_FLOOR, 1]` and renormalized to the simplex.
    pub fn predict(&self, x: &[f32]) -> Vec<f64> {
        let mut p: Vec<f64> = self.predict_raw(x).into_iter().map(|v| v.clamp(PROBE_FLOOR, 1.0)).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    }
}

/// Closed-form ridge regression from activations (`N x d`) to beliefs (`N x K`).
/// Inputs and targets are centred so the intercept is not penalized.
pub fn fit_belief_probe(acts: &[f32], d: usize, beliefs: &[f64], k: usize, lambda: f64) -> Result<ProbeModel> {
    if !(lambda > 0.0) {
        return Err(param_err("ridge strength must be positive"));
    }
    if d == 0 || k == 0 || acts.len() % d != 0 || beliefs.len() != acts.len() / d * k {
        return Err(param_err("probe inputs have inconsistent shapes"));
    }
    let n = acts.len() / d;
    if n == 0 {
        return Err(param_err("probe needs at least one row"));
    }
    let x: Vec<f64> = acts.iter().map(|&v| f64::from(v)).collect();
    let x_mean = column_means(&x, d);
    let y_mean = column_means(beliefs, k);
    let xc: Vec<f64> = x.iter().enumerate().map(|(i, &v)| v - x_mean[i % d]).collect();
    let yc: Vec<f64> = beliefs.iter().enumerate().map(|(i, &v)| v - y_mean[i % k]).collect();

    let mut xtx = vec![0.0; d * d];
    gemm(d, n, d, 1.0, &xc, (1, d), &xc, (d, 1), 0.0, &mut xtx, (d, 1));
    let mut xty = vec![0.0; d * k];
    gemm(d, n, k, 1.0, &xc, (1, d), &yc, (k, 1), 0.0, &mut xty, (k, 1));
    for i in 0..d {
        xtx[i * d + i] += lambda;
    }
    let a = DMatrix::from_row_slice(d, d, &xtx);
    let chol = a.cholesky().ok_or(MctError::Singular(lambda))?;
    let mut w = vec![0.0; d * k];
    for j in 0..k {
        let rhs = DVector::from_iterator(d, (0..d).map(|i| xty[i * k + j]));
        let sol = chol.solve(&rhs);
        for i in 0..d {
            w[i * k + j] = sol[i];
        }
    }
    let bias: Vec<f64> = (0..k)
        .map(|j| y_mean[j] - (0..d).map(|i| x_mean[i] * w[i * k + j]).sum::<f64>())
        .collect();
    Ok(ProbeModel {
        weights: Matrix::from_vec(d, k, w)?,
        bias,
        lambda,
    })
}

fn column_means(x: &[f64], c: usize) -> Vec<f64> {
    let mut m = vec![0.0; c];
    for row in x.chunks(c) {
        for (a, &b) in m.iter_mut().zip(row) {
            *a += b;
        }
    }
    let n = (x.len() / c).max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Mean `KL(b_t || probe(a_t))` over the given rows.
pub fn probe_kl(probe: &ProbeModel, acts: &[f32], d: usize, beliefs: &[f64]) -> Result<f64> {
    let k = probe.bias.len();
    if d != probe.weights.rows() || acts.len() % d != 0 || beliefs.len() != acts.len() / d * k {
        return Err(param_err("probe evaluation inputs have inconsistent shapes"));
    }
    let n = acts.len() / d;
    if n == 0 {
        return Err(param_err("probe evaluation needs at least one row"));
    }
    let total: f64 = acts
        .chunks(d)
        .zip(beliefs.chunks(k))
        .map(|(x, b)| kl_divergence(b, &probe.predict(x)))
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEvaluation {
    pub kl: f64,
    pub n_fit_rows: usize,
    pub n_eval_rows: usize,
}

/// Fits a probe on the fit sequences and scores it on the held-out ones.
pub fn held_out_probe_kl(
    acts: &[f32],
    d: usize,
    beliefs: &[f64],
    k: usize,
    seq_len: usize,
    holdout: f64,
    lambda: f64,
) -> Result<ProbeEvaluation> {
    let n = n_sequences(acts.len() / d.max(1), seq_len)?;
    let (n_fit, _) = split_sequences(n, holdout)?;
    let rows = n_fit * seq_len;
    let probe = fit_belief_probe(&acts[..rows * d], d, &beliefs[..rows * k], k, lambda)?;
    let kl = probe_kl(&probe, &acts[rows * d..], d, &beliefs[rows * k..])?;
    Ok(ProbeEvaluation {
        kl,
        n_fit_rows: rows,
        n_eval_rows: n * seq_len - rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub kl: f64,
    /// Clusters present in evaluation but absent from the fit split; these
    /// fall back to the global mean belief.
    pub unseen_clusters: usize,
}

/// Mean `KL(b_t || mean belief of cluster z_t)` on held-out sequences.
pub fn belief_reconstruction_kl(
    z: &[usize],
    seq_len: usize,
    m: usize,
    beliefs: &[f64],
    k: usize,
    holdout: f64,
) -> Result<ReconstructionResult> {
    let n = n_sequences(z.len(), seq_len)?;
    check_range(z, m, "cluster")?;
    if beliefs.len() != z.len() * k {
        return Err(param_err("beliefs do not match labels"));
    }
    let (n_fit, _) = split_sequences(n, holdout)?;
    let rows = n_fit * seq_len;
    let mut sums = vec![0.0; m * k];
    let mut counts = vec![0usize; m];
    for (&c, b) in z[..rows].iter().zip(beliefs[..rows * k].chunks(k)) {
        counts[c] += 1;
        for (s, &x) in sums[c * k..(c + 1) * k].iter_mut().zip(b) {
            *s += x;
        }
    }
    let global = column_means(&beliefs[..rows * k], k);
    let mut unseen = vec![false; m];
    let mut total = 0.0;
    for (&c, b) in z[rows..].iter().zip(beliefs[rows * k..].chunks(k)) {
        let kl = if counts[c] > 0 {
            let mean: Vec<f64> = sums[c * k..(c + 1) * k].iter().map(|s| s / counts[c] as f64).collect();
            kl_divergence(b, &mean)
        } else {
            unseen[c] = true;
            kl_divergence(b, &global)
        };
        total += kl;
    }
    Ok(ReconstructionResult {
        kl: total / (z.len() - rows) as f64,
        unseen_clusters: unseen.iter().filter(|&&u| u).count(),
    })
}

/// Held-out mean `-ln P(s_{t+1} | z_t)` with the conditional fit (smoothed) on the fit split.
pub fn next_state_nll(
    z: &[usize],
    s_true: &[usize],
    seq_len: usize,
    m: usize,
    k: usize,
    holdout: f64,
    alpha: f64,
) -> Result<f64> {
    let n = n_sequences(z.len(), seq_len)?;
    if s_true.len() != z.len() {
        return Err(param_err("label sequences differ in length"));
    }
    check_range(z, m, "cluster")?;
    check_range(s_true, k, "state")?;
    if !(alpha > 0.0) || seq_len < 2 {
        return Err(param_err("next_state_nll needs alpha > 0 and sequences of length >= 2"));
    }
    let (n_fit, _) = split_sequences(n, holdout)?;
    let rows = n_fit * seq_len;
    let mut counts = vec![0u64; m * k];
    for (zs, ss) in z[..rows].chunks(seq_len).zip(s_true[..rows].chunks(seq_len)) {
        for t in 0..seq_len - 1 {
            counts[zs[t] * k + ss[t + 1]] += 1;
        }
    }
    let row: Vec<u64> = counts.chunks(k).map(|r| r.iter().sum()).collect();
    let (mut nll, mut count) = (0.0, 0usize);
    for (zs, ss) in z[rows..].chunks(seq_len).zip(s_true[rows..].chunks(seq_len)) {
        for t in 0..seq_len - 1 {
            let c = zs[t];
            nll -= ((counts[c * k + ss[t + 1]] as f64 + alpha) / (row[c] as f64 + alpha * k as f64)).ln();
            count += 1;
        }
    }
    Ok(nll / count as f64)
}

/// Fraction of positions where `alignment[z_t] == s_t`.
pub fn cluster_accuracy(z: &[usize], s_true: &[usize], alignment: Option<&[usize]>) -> Result<f64> {
    let perm = alignment.ok_or(MctError::MissingAlignment("cluster accuracy needs a Hungarian alignment"))?;
    if z.len() != s_true.len() || z.is_empty() {
        return Err(param_err("label sequences must be non-empty and of equal length"));
    }
    check_range(z, perm.len(), "cluster")?;
    let hits = z.iter().zip(s_true).filter(|(&c, &s)| perm[c] == s).count();
    Ok(hits as f64 / z.len() as f64)
}
