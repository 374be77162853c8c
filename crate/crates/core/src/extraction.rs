//! State extractors: map activations (or beliefs, tokens, true states) to
//! discrete labels `z_t`, plus Hungarian alignment of clusters to true states.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, MctError, Result};
use crate::rng::{self, Stream};

/// Target dimension of the PCA and random-projection extractors.
pub const PROJECTION_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative inertia change that ends Lloyd iterations.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// `M x d`, row-major.
    pub centroids: Vec<f64>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(p: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks(d).enumerate() {
        let dist = sq_dist(p, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

/// k-means with k-means++ seeding, best of several restarts by inertia.
pub fn kmeans(points: &[f64], d: usize, m: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_with(points, d, m, seed, &KMeansConfig::default())
}

pub fn kmeans_with(points: &[f64], d: usize, m: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if d == 0 || points.len() % d != 0 {
        return Err(param_err(format!("{} values do not form rows of width {d}", points.len())));
    }
    let n = points.len() / d;
    if m == 0 || n < m {
        return Err(param_err(format!("k-means needs 1 <= M <= N (M={m}, N={n})")));
    }
    let mut rng = rng::stream(seed, Stream::Clustering);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let init = plus_plus_init(points, d, m, &mut rng);
        let run = lloyd(points, d, m, init, cfg);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_init(points: &[f64], d: usize, m: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let n = points.len() / d;
    let mut centroids = Vec::with_capacity(m * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * d..(first + 1) * d]);
    let mut dist: Vec<f64> = points.chunks(d).map(|p| sq_dist(p, &centroids[..d])).collect();
    for _ in 1..m {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick * d..(pick + 1) * d].to_vec();
        for (dd, p) in dist.iter_mut().zip(points.chunks(d)) {
            *dd = dd.min(sq_dist(p, &c));
        }
        centroids.extend(c);
    }
    centroids
}

fn lloyd(points: &[f64], d: usize, m: usize, mut centroids: Vec<f64>, cfg: &KMeansConfig) -> KMeansResult {
    let n = points.len() / d;
    let mut labels = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut prev = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let inertia = assign(points, d, &centroids, &mut labels, &mut dist);
        update(points, d, m, &mut centroids, &mut labels, &mut dist);
        let converged = inertia == 0.0 || (prev - inertia).abs() <= cfg.tol * prev;
        prev = inertia;
        if converged {
            break;
        }
    }
    let inertia = assign(points, d, &centroids, &mut labels, &mut dist);
    KMeansResult {
        labels,
        centroids,
        inertia,
    }
}

fn assign(points: &[f64], d: usize, centroids: &[f64], labels: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in points.chunks(d).enumerate() {
        let (j, dd) = nearest(p, centroids, d);
        labels[i] = j;
        dist[i] = dd;
        inertia += dd;
    }
    inertia
}

/// Recompute centroids as label means. Empty clusters move to the point
/// farthest from its current centroid.
fn update(points: &[f64], d: usize, m: usize, centroids: &mut [f64], labels: &mut [usize], dist: &mut [f64]) {
    let mut sums = vec![0.0; m * d];
    let mut counts = vec![0usize; m];
    for (p, &l) in points.chunks(d).zip(labels.iter()) {
        counts[l] += 1;
        for (s, &x) in sums[l * d..(l + 1) * d].iter_mut().zip(p) {
            *s += x;
        }
    }
    for j in 0..m {
        if counts[j] == 0 {
            let far = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map_or(0, |(i, _)| i);
            let old = labels[far];
            counts[old] -= 1;
            for (s, &x) in sums[old * d..(old + 1) * d].iter_mut().zip(&points[far * d..(far + 1) * d]) {
                *s -= x;
            }
            labels[far] = j;
            dist[far] = 0.0;
            counts[j] = 1;
            sums[j * d..(j + 1) * d].copy_from_slice(&points[far * d..(far + 1) * d]);
        }
    }
    for j in 0..m {
        if counts[j] > 0 {
            for x in 0..d {
                centroids[j * d + x] = sums[j * d + x] / counts[j] as f64;
            }
        }
    }
}

/// An affine map `x -> (x - mean) W` from `d` to `r` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProjection {
    pub d: usize,
    pub r: usize,
    pub mean: Vec<f64>,
    /// `d x r`, row-major.
    pub weights: Vec<f64>,
}

impl LinearProjection {
    pub fn apply(&self, points: &[f64]) -> Result<Vec<f64>> {
        if points.len() % self.d != 0 {
            return Err(param_err("points do not form complete rows"));
        }
        let mut out = Vec::with_capacity(points.len() / self.d * self.r);
        let mut centred = vec![0.0; self.d];
        for p in points.chunks(self.d) {
            for ((c, &x), &m) in centred.iter_mut().zip(p).zip(&self.mean) {
                *c = x - m;
            }
            let mut row = vec![0.0; self.r];
            for (i, &x) in centred.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(&self.weights[i * self.r..(i + 1) * self.r]) {
                    *o += x * w;
                }
            }
            out.extend(row);
        }
        Ok(out)
    }
}

/// Top-`r` principal directions of mean-centred points, each with its
/// largest-magnitude coordinate made positive.
pub fn pca_basis(points: &[f64], d: usize, r: usize) -> Result<LinearProjection> {
    if d == 0 || points.len() % d != 0 {
        return Err(param_err("points do not form complete rows"));
    }
    let n = points.len() / d;
    if r == 0 || r > n.min(d) {
        return Err(param_err(format!("PCA dimension {r} exceeds min(N={n}, d={d})")));
    }
    let mut mean = vec![0.0; d];
    for p in points.chunks(d) {
        for (m, &x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<f64> = points.iter().enumerate().map(|(i, &x)| x - mean[i % d]).collect();
    let mut cov = vec![0.0; d * d];
    crate::nn::gemm(d, n, d, 1.0 / n as f64, &centred, (1, d), &centred, (d, 1), 0.0, &mut cov, (d, 1));
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut weights = vec![0.0; d * r];
    for (c, &idx) in order.iter().take(r).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let sign = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map_or(1.0, |(_, &v)| v.signum());
        for i in 0..d {
            weights[i * r + c] = col[i] * sign;
        }
    }
    Ok(LinearProjection { d, r, mean, weights })
}

/// Mean-centred projection onto the top `r` principal directions.
pub fn pca_project(points: &[f64], d: usize, r: usize) -> Result<Vec<f64>> {
    pca_basis(points, d, r)?.apply(points)
}

/// A `d x r` matrix with i.i.d. `N(0, 1/r)` entries (no centring).
pub fn random_basis(d: usize, r: usize, seed: u64) -> Result<LinearProjection> {
    if d == 0 || r == 0 {
        return Err(param_err("random projection needs d, r > 0"));
    }
    let normal = Normal::new(0.0, 1.0 / (r as f64).sqrt()).map_err(|e| param_err(e.to_string()))?;
    let mut rng = rng::stream(seed, Stream::Projection);
    Ok(LinearProjection {
        d,
        r,
        mean: vec![0.0; d],
        weights: (0..d * r).map(|_| normal.sample(&mut rng)).collect(),
    })
}

pub fn random_project(points: &[f64], d: usize, r: usize, seed: u64) -> Result<Vec<f64>> {
    random_basis(d, r, seed)?.apply(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    ResidualKmeans,
    PcaKmeans,
    RandprojKmeans,
    BeliefKmeans,
    TokenBaseline,
    TrueStateOracle,
}

impl ExtractionMethod {
    pub const ALL: [ExtractionMethod; 6] = [
        ExtractionMethod::ResidualKmeans,
        ExtractionMethod::PcaKmeans,
        ExtractionMethod::RandprojKmeans,
        ExtractionMethod::BeliefKmeans,
        ExtractionMethod::TokenBaseline,
        ExtractionMethod::TrueStateOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExtractionMethod::ResidualKmeans => "residual_kmeans",
            ExtractionMethod::PcaKmeans => "pca_kmeans",
            ExtractionMethod::RandprojKmeans => "randproj_kmeans",
            ExtractionMethod::BeliefKmeans => "belief_kmeans",
            ExtractionMethod::TokenBaseline => "token_baseline",
            ExtractionMethod::TrueStateOracle => "true_state_oracle",
        }
    }
}

impl fmt::Display for ExtractionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExtractionMethod {
    type Err = MctError;
    fn from_str(s: &str) -> Result<Self> {
        ExtractionMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| param_err(format!("unknown extraction method '{s}'")))
    }
}

/// Everything an extractor may read. All row-indexed arrays are
/// sequence-major over `n_seq * seq_len` positions.
#[derive(Debug, Clone, Copy)]
pub struct StateInputs<'a> {
    pub n_seq: usize,
    pub seq_len: usize,
    /// `N x d_model` activations; always required, raw centroids live here.
    pub activations: &'a [f32],
    pub d_model: usize,
    /// `N x K` exact beliefs.
    pub beliefs: Option<&'a [f64]>,
    pub k: usize,
    pub tokens: Option<&'a [usize]>,
    pub vocab: usize,
    pub hidden: Option<&'a [usize]>,
}

impl StateInputs<'_> {
    pub fn rows(&self) -> usize {
        self.n_seq * self.seq_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateAssignment {
    pub method: ExtractionMethod,
    pub m: usize,
    pub seed: u64,
    pub n_seq: usize,
    pub seq_len: usize,
    /// Labels in `0..m`, sequence-major.
    pub z: Vec<usize>,
    /// Centroids in the clustering space, `m x centroid_dim`.
    pub centroids: Vec<f64>,
    pub centroid_dim: usize,
    /// Mean activation per cluster, `m x d_model`.
    pub raw_centroids: Vec<f64>,
    pub d_model: usize,
    /// Clusters with no member.
    pub empty: Vec<bool>,
    /// Cluster -> true state, present only when aligned (`m == K`).
    pub alignment: Option<Vec<usize>>,
}

impl StateAssignment {
    pub fn raw_centroid(&self, cluster: usize) -> &[f64] {
        &self.raw_centroids[cluster * self.d_model..(cluster + 1) * self.d_model]
    }

    /// Aligns clusters to `hidden` with Hungarian matching and stores the permutation.
    pub fn align(&mut self, hidden: &[usize], k: usize) -> Result<&[usize]> {
        let perm = hungarian_align(&self.z, hidden, self.m, k)?;
        self.alignment = Some(perm);
        Ok(self.alignment.as_deref().expect("just set"))
    }

    /// Cluster aligned to true state `state`.
    pub fn cluster_for_state(&self, state: usize) -> Result<usize> {
        let perm = self
            .alignment
            .as_ref()
            .ok_or(MctError::MissingAlignment("assignment has not been aligned"))?;
        perm.iter()
            .position(|&s| s == state)
            .ok_or_else(|| param_err(format!("state {state} outside alignment")))
    }
}

pub fn extract_states(method: ExtractionMethod, inputs: &StateInputs<'_>, m: usize, seed: u64) -> Result<StateAssignment> {
    extract_states_with(method, inputs, m, seed, PROJECTION_DIM)
}

/// Fits and labels the same inputs; raw centroids come from those inputs.
pub fn extract_states_with(
    method: ExtractionMethod,
    inputs: &StateInputs<'_>,
    m: usize,
    seed: u64,
    proj_dim: usize,
) -> Result<StateAssignment> {
    let fitted = fit_extractor(method, inputs, m, seed, proj_dim)?;
    let z = fitted.labels.clone().expect("fit keeps its labels");
    fitted.into_assignment(inputs, z, None, seed)
}

/// Fits on `fit` and labels `eval`; raw centroids come from the fit
/// activations, so nothing about `eval` leaks into the patch vectors.
pub fn extract_states_split(
    method: ExtractionMethod,
    fit: &StateInputs<'_>,
    eval: &StateInputs<'_>,
    m: usize,
    seed: u64,
    proj_dim: usize,
) -> Result<StateAssignment> {
    let fitted = fit_extractor(method, fit, m, seed, proj_dim)?;
    let fit_labels = fitted.labels.clone().expect("fit keeps its labels");
    let z = fitted.assign(eval)?;
    fitted.into_assignment(eval, z, Some((fit, &fit_labels)), seed)
}

/// A fitted extractor that can label new inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedExtractor {
    pub method: ExtractionMethod,
    pub m: usize,
    pub projection: Option<LinearProjection>,
    /// Cluster centres in the clustering space, empty for label copies.
    pub centroids: Vec<f64>,
    pub centroid_dim: usize,
    labels: Option<Vec<usize>>,
}

fn activations_f64(inputs: &StateInputs<'_>) -> Result<Vec<f64>> {
    let n = inputs.rows();
    if inputs.activations.len() != n * inputs.d_model {
        return Err(MctError::Shape {
            op: "extract_states(activations)",
            left: vec![n, inputs.d_model],
            right: vec![inputs.activations.len()],
        });
    }
    Ok(inputs.activations.iter().map(|&x| f64::from(x)).collect())
}

fn beliefs_of<'a>(inputs: &StateInputs<'a>) -> Result<&'a [f64]> {
    let b = inputs.beliefs.ok_or_else(|| param_err("belief_kmeans needs beliefs"))?;
    if b.len() != inputs.rows() * inputs.k {
        return Err(param_err("belief array does not match N x K"));
    }
    Ok(b)
}

fn copied_labels<'a>(method: ExtractionMethod, inputs: &StateInputs<'a>, m: usize) -> Result<&'a [usize]> {
    let n = inputs.rows();
    let labels = match method {
        ExtractionMethod::TokenBaseline => {
            if m != inputs.vocab {
                return Err(param_err(format!("token_baseline needs M = V ({m} != {})", inputs.vocab)));
            }
            inputs.tokens.ok_or_else(|| param_err("token_baseline needs tokens"))?
        }
        _ => {
            if m != inputs.k {
                return Err(param_err(format!("true_state_oracle needs M = K ({m} != {})", inputs.k)));
            }
            inputs.hidden.ok_or_else(|| param_err("true_state_oracle needs hidden states"))?
        }
    };
    check_labels(labels, m, n)?;
    Ok(labels)
}

pub fn fit_extractor(
    method: ExtractionMethod,
    inputs: &StateInputs<'_>,
    m: usize,
    seed: u64,
    proj_dim: usize,
) -> Result<FittedExtractor> {
    let d = inputs.d_model;
    let acts = activations_f64(inputs)?;
    let (projection, space, dim) = match method {
        ExtractionMethod::ResidualKmeans => (None, acts, d),
        ExtractionMethod::PcaKmeans => {
            let basis = pca_basis(&acts, d, proj_dim.min(d))?;
            let p = basis.apply(&acts)?;
            let r = basis.r;
            (Some(basis), p, r)
        }
        ExtractionMethod::RandprojKmeans => {
            let basis = random_basis(d, proj_dim, seed)?;
            let p = basis.apply(&acts)?;
            (Some(basis), p, proj_dim)
        }
        ExtractionMethod::BeliefKmeans => (None, beliefs_of(inputs)?.to_vec(), inputs.k),
        ExtractionMethod::TokenBaseline | ExtractionMethod::TrueStateOracle => {
            let labels = copied_labels(method, inputs, m)?.to_vec();
            return Ok(FittedExtractor {
                method,
                m,
                projection: None,
                centroids: Vec::new(),
                centroid_dim: 0,
                labels: Some(labels),
            });
        }
    };
    let r = kmeans(&space, dim, m, seed)?;
    Ok(FittedExtractor {
        method,
        m,
        projection,
        centroids: r.centroids,
        centroid_dim: dim,
        labels: Some(r.labels),
    })
}

impl FittedExtractor {
    /// Labels `inputs` by nearest centroid (or copies tokens / hidden states).
    pub fn assign(&self, inputs: &StateInputs<'_>) -> Result<Vec<usize>> {
        let space = match self.method {
            ExtractionMethod::TokenBaseline | ExtractionMethod::TrueStateOracle => {
                return Ok(copied_labels(self.method, inputs, self.m)?.to_vec());
            }
            ExtractionMethod::BeliefKmeans => beliefs_of(inputs)?.to_vec(),
            _ => {
                let acts = activations_f64(inputs)?;
                match &self.projection {
                    Some(p) => p.apply(&acts)?,
                    None => acts,
                }
            }
        };
        if space.len() != inputs.rows() * self.centroid_dim {
            return Err(param_err("inputs do not match the fitted extractor"));
        }
        Ok(space
            .chunks(self.centroid_dim)
            .map(|p| nearest(p, &self.centroids, self.centroid_dim).0)
            .collect())
    }

    fn into_assignment(
        self,
        eval: &StateInputs<'_>,
        z: Vec<usize>,
        centroid_source: Option<(&StateInputs<'_>, &[usize])>,
        seed: u64,
    ) -> Result<StateAssignment> {
        let d = eval.d_model;
        activations_f64(eval)?;
        let (src, labels) = centroid_source.unwrap_or((eval, &z));
        let (raw_centroids, fit_empty) = group_means(src.activations, d, labels, self.m);
        let mut empty = fit_empty;
        let mut seen = vec![false; self.m];
        z.iter().for_each(|&c| seen[c] = true);
        empty.iter_mut().zip(&seen).for_each(|(e, &s)| *e = *e || !s);
        let (centroids, centroid_dim) = if self.centroid_dim == 0 {
            (raw_centroids.clone(), d)
        } else {
            (self.centroids, self.centroid_dim)
        };
        Ok(StateAssignment {
            method: self.method,
            m: self.m,
            seed,
            n_seq: eval.n_seq,
            seq_len: eval.seq_len,
            z,
            centroids,
            centroid_dim,
            raw_centroids,
            d_model: d,
            empty,
            alignment: None,
        })
    }
}

fn check_labels(labels: &[usize], m: usize, n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(param_err(format!("expected {n} labels, got {}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&x| x >= m) {
        return Err(param_err(format!("label {bad} outside 0..{m}")));
    }
    Ok(())
}

/// Per-label mean of `rows` (`N x d`); empty groups get a zero vector and are flagged.
pub fn group_means(rows: &[f32], d: usize, labels: &[usize], m: usize) -> (Vec<f64>, Vec<bool>) {
    let mut sums = vec![0.0f64; m * d];
    let mut counts = vec![0usize; m];
    for (row, &l) in rows.chunks(d).zip(labels) {
        counts[l] += 1;
        for (s, &x) in sums[l * d..(l + 1) * d].iter_mut().zip(row) {
            *s += f64::from(x);
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        if c > 0 {
            sums[j * d..(j + 1) * d].iter_mut().for_each(|s| *s /= c as f64);
        }
    }
    (sums, counts.iter().map(|&c| c == 0).collect())
}

/// `m x k` co-occurrence counts of cluster labels and true states.
pub fn contingency(z: &[usize], s_true: &[usize], m: usize, k: usize) -> Vec<Vec<i64>> {
    let mut c = vec![vec![0i64; k]; m];
    for (&a, &b) in z.iter().zip(s_true) {
        c[a][b] += 1;
    }
    c
}

/// Cluster -> state permutation maximizing agreement with `s_true`.
pub fn hungarian_align(z: &[usize], s_true: &[usize], m: usize, k: usize) -> Result<Vec<usize>> {
    if m != k {
        return Err(MctError::UnsupportedAlignment { m, k });
    }
    if z.len() != s_true.len() {
        return Err(param_err("label sequences differ in length"));
    }
    check_labels(z, m, z.len())?;
    check_labels(s_true, k, s_true.len())?;
    let c = contingency(z, s_true, m, k);
    let cost: Vec<Vec<i64>> = c.iter().map(|row| row.iter().map(|&x| -x).collect()).collect();
    Ok(min_cost_assignment(&cost))
}

/// Square min-cost assignment (shortest augmenting paths with potentials).
/// Returns `row -> column`.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    // p[j]: row matched to column j (1-based, 0 = none)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}
