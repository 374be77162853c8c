//! The benchmark model: a pre-LN causal transformer with learned positional
//! embeddings, GELU MLPs and an untied unembedding.
//!
//! Parameter names are stable and double as the checkpoint keys:
//!
//! | name | shape |
//! |------|-------|
//! | `embed.tok` | `V x d` |
//! | `embed.pos` | `max_len x d` |
//! | `block{l}.ln1.gamma`, `block{l}.ln1.beta` | `d` |
//! | `block{l}.attn.{wq,wk,wv,wo}` | `d x d` |
//! | `block{l}.attn.{bq,bk,bv,bo}` | `d` |
//! | `block{l}.ln2.gamma`, `block{l}.ln2.beta` | `d` |
//! | `block{l}.mlp.w_in` / `b_in` | `d x d_mlp` / `d_mlp` |
//! | `block{l}.mlp.w_out` / `b_out` | `d_mlp x d` / `d` |
//! | `final_ln.gamma`, `final_ln.beta` | `d` |
//! | `unembed.w` / `unembed.b` | `d x V` / `V` |
//!
//! Capture points are `embed_out`, `resid_post_{l}` for each block and
//! `final_ln`. Patching overwrites the full residual vector at one
//! `(point, position)` for every sequence in the batch; everything
//! downstream, including attention at later positions, sees the patched value.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, MctError, Result};
use crate::hmm::{bayes_optimal_loss, SequenceBatch};
use crate::nn::ops;
use crate::nn::{AdamConfig, ParamStore, Scalar, Tensor};
use crate::rng::{self, Stream};

/// Sequences per chunk for inference passes.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Two blocks, width 128, four heads, MLP width 256, context 64.
    pub fn benchmark(vocab: usize, seed: u64) -> Self {
        Self {
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            d_mlp: 256,
            max_len: 64,
            vocab,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(param_err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab == 0 || self.max_len == 0 || self.d_mlp == 0 {
            return Err(param_err("vocab, max_len and d_mlp must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Named residual-stream capture point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CapturePoint {
    EmbedOut,
    ResidPost(usize),
    FinalLn,
}

impl CapturePoint {
    /// All points of a model with `n_layers` blocks, shallow to deep.
    pub fn all(n_layers: usize) -> Vec<CapturePoint> {
        let mut v = vec![CapturePoint::EmbedOut];
        v.extend((0..n_layers).map(CapturePoint::ResidPost));
        v.push(CapturePoint::FinalLn);
        v
    }
}

impl fmt::Display for CapturePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CapturePoint::EmbedOut => f.write_str("embed_out"),
            CapturePoint::ResidPost(l) => write!(f, "resid_post_{l}"),
            CapturePoint::FinalLn => f.write_str("final_ln"),
        }
    }
}

impl FromStr for CapturePoint {
    type Err = MctError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed_out" => Ok(CapturePoint::EmbedOut),
            "final_ln" => Ok(CapturePoint::FinalLn),
            _ => s
                .strip_prefix("resid_post_")
                .and_then(|l| l.parse().ok())
                .map(CapturePoint::ResidPost)
                .ok_or_else(|| param_err(format!("unknown capture point '{s}'"))),
        }
    }
}

impl Serialize for CapturePoint {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CapturePoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Activations at every capture point, each `n x len x d_model`, stored `f32`.
#[derive(Debug, Clone, Default)]
pub struct ActivationCapture {
    pub n: usize,
    pub len: usize,
    pub d_model: usize,
    pub points: BTreeMap<CapturePoint, Vec<f32>>,
}

impl ActivationCapture {
    pub fn get(&self, point: CapturePoint) -> Result<&[f32]> {
        self.points
            .get(&point)
            .map(Vec::as_slice)
            .ok_or_else(|| param_err(format!("capture point {point} not recorded")))
    }

    /// Activation vector of sequence `s` at position `t`.
    pub fn vector(&self, point: CapturePoint, s: usize, t: usize) -> Result<&[f32]> {
        let r = s * self.len + t;
        Ok(&self.get(point)?[r * self.d_model..(r + 1) * self.d_model])
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_in: usize,
    b_in: usize,
    w_out: usize,
    b_out: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    w_u: usize,
    b_u: usize,
}

impl Layout {
    fn resolve<S: Scalar>(store: &ParamStore<S>, n_layers: usize) -> Result<Self> {
        let ix = |n: &str| store.index_of(n);
        let blocks = (0..n_layers)
            .map(|l| {
                let p = |s: &str| ix(&format!("block{l}.{s}"));
                Ok(BlockLayout {
                    ln1_g: p("ln1.gamma")?,
                    ln1_b: p("ln1.beta")?,
                    wq: p("attn.wq")?,
                    bq: p("attn.bq")?,
                    wk: p("attn.wk")?,
                    bk: p("attn.bk")?,
                    wv: p("attn.wv")?,
                    bv: p("attn.bv")?,
                    wo: p("attn.wo")?,
                    bo: p("attn.bo")?,
                    ln2_g: p("ln2.gamma")?,
                    ln2_b: p("ln2.beta")?,
                    w_in: p("mlp.w_in")?,
                    b_in: p("mlp.b_in")?,
                    w_out: p("mlp.w_out")?,
                    b_out: p("mlp.b_out")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok: ix("embed.tok")?,
            pos: ix("embed.pos")?,
            blocks,
            lnf_g: ix("final_ln.gamma")?,
            lnf_b: ix("final_ln.beta")?,
            w_u: ix("unembed.w")?,
            b_u: ix("unembed.b")?,
        })
    }
}

struct BlockCache<S> {
    ln1: Vec<S>,
    ln1_mean: Vec<S>,
    ln1_rstd: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    att: Vec<S>,
    att_out: Vec<S>,
    mid: Vec<S>,
    ln2: Vec<S>,
    ln2_mean: Vec<S>,
    ln2_rstd: Vec<S>,
    h_pre: Vec<S>,
    h_act: Vec<S>,
    out: Vec<S>,
}

struct Cache<S> {
    embed: Vec<S>,
    blocks: Vec<BlockCache<S>>,
    lnf: Vec<S>,
    lnf_mean: Vec<S>,
    lnf_rstd: Vec<S>,
    logits: Vec<S>,
}

struct Patch<'a, S> {
    point: CapturePoint,
    pos: usize,
    vector: &'a [S],
}

impl<S: Scalar> Patch<'_, S> {
    fn apply(&self, at: CapturePoint, acts: &mut [S], b: usize, t: usize, d: usize) {
        if self.point != at {
            return;
        }
        for s in 0..b {
            let r = s * t + self.pos;
            acts[r * d..(r + 1) * d].copy_from_slice(self.vector);
        }
    }
}

/// The benchmark transformer with its parameters.
#[derive(Debug, Clone)]
pub struct Model<S> {
    cfg: ModelConfig,
    params: ParamStore<S>,
    layout: Layout,
}

impl<S: Scalar> Model<S> {
    /// Builds a freshly initialized model: weights `N(0, 0.02)`, biases zero,
    /// layer-norm gains one.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, f, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab);
        let mut rng = rng::stream(cfg.seed, Stream::ModelInit);
        let normal = Normal::new(0.0f64, 0.02).map_err(|e| param_err(e.to_string()))?;
        let mut weight = |shape: &[usize]| -> Tensor<S> {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| S::from_f64_lossy(normal.sample(&mut rng))).collect();
            Tensor::from_vec(shape, data).expect("shape product matches")
        };
        let mut store = ParamStore::new();
        store.insert("embed.tok", weight(&[v, d]))?;
        store.insert("embed.pos", weight(&[cfg.max_len, d]))?;
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("block{l}.{s}");
            store.insert(&p("ln1.gamma"), Tensor::full(&[d], S::one()))?;
            store.insert(&p("ln1.beta"), Tensor::zeros(&[d]))?;
            for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
                store.insert(&p(&format!("attn.{w}")), weight(&[d, d]))?;
                store.insert(&p(&format!("attn.{b}")), Tensor::zeros(&[d]))?;
            }
            store.insert(&p("ln2.gamma"), Tensor::full(&[d], S::one()))?;
            store.insert(&p("ln2.beta"), Tensor::zeros(&[d]))?;
            store.insert(&p("mlp.w_in"), weight(&[d, f]))?;
            store.insert(&p("mlp.b_in"), Tensor::zeros(&[f]))?;
            store.insert(&p("mlp.w_out"), weight(&[f, d]))?;
            store.insert(&p("mlp.b_out"), Tensor::zeros(&[d]))?;
        }
        store.insert("final_ln.gamma", Tensor::full(&[d], S::one()))?;
        store.insert("final_ln.beta", Tensor::zeros(&[d]))?;
        store.insert("unembed.w", weight(&[d, v]))?;
        store.insert("unembed.b", Tensor::zeros(&[v]))?;
        Self::from_params(cfg, store)
    }

    /// Wraps an existing parameter store (e.g. a loaded checkpoint).
    pub fn from_params(cfg: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::resolve(&params, cfg.n_layers)?;
        let expect = |idx: usize, shape: &[usize]| -> Result<()> {
            let p = &params.params()[idx];
            if p.value.shape() == shape {
                Ok(())
            } else {
                Err(MctError::Shape {
                    op: "Model::from_params",
                    left: shape.to_vec(),
                    right: p.value.shape().to_vec(),
                })
            }
        };
        let (d, f, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab);
        expect(layout.tok, &[v, d])?;
        expect(layout.pos, &[cfg.max_len, d])?;
        for b in &layout.blocks {
            for w in [b.wq, b.wk, b.wv, b.wo] {
                expect(w, &[d, d])?;
            }
            expect(b.w_in, &[d, f])?;
            expect(b.w_out, &[f, d])?;
        }
        expect(layout.w_u, &[d, v])?;
        Ok(Self { cfg, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            cfg: self.cfg,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn w(&self, idx: usize) -> &[S] {
        self.params.value(idx)
    }

    fn check_input(&self, tokens: &[usize], b: usize, t: usize) -> Result<()> {
        if tokens.len() != b * t {
            return Err(MctError::Shape {
                op: "forward(tokens)",
                left: vec![b, t],
                right: vec![tokens.len()],
            });
        }
        if t > self.cfg.max_len {
            return Err(MctError::Input(format!("length {t} exceeds max_len {}", self.cfg.max_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&x| x >= self.cfg.vocab) {
            return Err(MctError::Input(format!("token {bad} out of vocabulary {}", self.cfg.vocab)));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[usize], b: usize, t: usize) -> Result<Vec<S>> {
        let d = self.cfg.d_model;
        let mut x = vec![S::zero(); b * t * d];
        ops::embed_gather_forward(&mut x, self.w(self.layout.tok), tokens, d)?;
        let pos = self.w(self.layout.pos);
        for s in 0..b {
            for p in 0..t {
                let r = (s * t + p) * d;
                for j in 0..d {
                    x[r + j] = x[r + j] + pos[p * d + j];
                }
            }
        }
        Ok(x)
    }

    fn block_forward(&self, l: usize, input: &[S], b: usize, t: usize) -> Result<BlockCache<S>> {
        let bl = self.layout.blocks[l];
        let (d, f, h) = (self.cfg.d_model, self.cfg.d_mlp, self.cfg.n_heads);
        let hd = d / h;
        let n = b * t;
        let z = || vec![S::zero(); n * d];
        let mut c = BlockCache {
            ln1: z(),
            ln1_mean: vec![S::zero(); n],
            ln1_rstd: vec![S::zero(); n],
            q: z(),
            k: z(),
            v: z(),
            att: vec![S::zero(); b * h * t * t],
            att_out: z(),
            mid: z(),
            ln2: z(),
            ln2_mean: vec![S::zero(); n],
            ln2_rstd: vec![S::zero(); n],
            h_pre: vec![S::zero(); n * f],
            h_act: vec![S::zero(); n * f],
            out: z(),
        };
        ops::layernorm_forward(
            &mut c.ln1,
            &mut c.ln1_mean,
            &mut c.ln1_rstd,
            input,
            self.w(bl.ln1_g),
            self.w(bl.ln1_b),
            (n, d),
        )?;
        ops::matmul_forward(&mut c.q, &c.ln1, self.w(bl.wq), Some(self.w(bl.bq)), (n, d, d))?;
        ops::matmul_forward(&mut c.k, &c.ln1, self.w(bl.wk), Some(self.w(bl.bk)), (n, d, d))?;
        ops::matmul_forward(&mut c.v, &c.ln1, self.w(bl.wv), Some(self.w(bl.bv)), (n, d, d))?;
        let scale = S::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let mut scores = vec![S::zero(); t * t];
        for s in 0..b {
            for head in 0..h {
                let off = s * t * d + head * hd;
                gemm_qkt(&c.q[off..], &c.k[off..], &mut scores, t, hd, d, scale);
                ops::causal_mask_forward(&mut scores, t);
                let a_off = (s * h + head) * t * t;
                let att = &mut c.att[a_off..a_off + t * t];
                ops::softmax_rows_forward(att, &scores, (t, t))?;
                crate::nn::gemm(t, t, hd, S::one(), att, (t, 1), &c.v[off..], (d, 1), S::zero(), &mut c.att_out[off..], (d, 1));
            }
        }
        ops::matmul_forward(&mut c.mid, &c.att_out, self.w(bl.wo), Some(self.w(bl.bo)), (n, d, d))?;
        for (m, &x) in c.mid.iter_mut().zip(input) {
            *m = *m + x;
        }
        ops::layernorm_forward(
            &mut c.ln2,
            &mut c.ln2_mean,
            &mut c.ln2_rstd,
            &c.mid,
            self.w(bl.ln2_g),
            self.w(bl.ln2_b),
            (n, d),
        )?;
        ops::matmul_forward(&mut c.h_pre, &c.ln2, self.w(bl.w_in), Some(self.w(bl.b_in)), (n, d, f))?;
        ops::gelu_forward(&mut c.h_act, &c.h_pre);
        ops::matmul_forward(&mut c.out, &c.h_act, self.w(bl.w_out), Some(self.w(bl.b_out)), (n, f, d))?;
        ops::add_forward_inplace(&mut c.out, &c.mid);
        Ok(c)
    }

    fn final_ln(&self, x: &[S], n: usize) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
        let d = self.cfg.d_model;
        let (mut out, mut mean, mut rstd) = (vec![S::zero(); n * d], vec![S::zero(); n], vec![S::zero(); n]);
        ops::layernorm_forward(
            &mut out,
            &mut mean,
            &mut rstd,
            x,
            self.w(self.layout.lnf_g),
            self.w(self.layout.lnf_b),
            (n, d),
        )?;
        Ok((out, mean, rstd))
    }

    fn unembed(&self, x: &[S], n: usize) -> Result<Vec<S>> {
        let (d, v) = (self.cfg.d_model, self.cfg.vocab);
        let mut logits = vec![S::zero(); n * v];
        ops::matmul_forward(&mut logits, x, self.w(self.layout.w_u), Some(self.w(self.layout.b_u)), (n, d, v))?;
        Ok(logits)
    }

    fn run(&self, tokens: &[usize], b: usize, t: usize, patch: Option<&Patch<'_, S>>) -> Result<Cache<S>> {
        self.check_input(tokens, b, t)?;
        let d = self.cfg.d_model;
        let n = b * t;
        let mut embed = self.embed(tokens, b, t)?;
        if let Some(p) = patch {
            p.apply(CapturePoint::EmbedOut, &mut embed, b, t, d);
        }
        let mut blocks: Vec<BlockCache<S>> = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let input = blocks.last().map_or(embed.as_slice(), |c| c.out.as_slice());
            let mut c = self.block_forward(l, input, b, t)?;
            if let Some(p) = patch {
                p.apply(CapturePoint::ResidPost(l), &mut c.out, b, t, d);
            }
            blocks.push(c);
        }
        let last = blocks.last().map_or(embed.as_slice(), |c| c.out.as_slice());
        let (mut lnf, lnf_mean, lnf_rstd) = self.final_ln(last, n)?;
        if let Some(p) = patch {
            p.apply(CapturePoint::FinalLn, &mut lnf, b, t, d);
        }
        let logits = self.unembed(&lnf, n)?;
        Ok(Cache {
            embed,
            blocks,
            lnf,
            lnf_mean,
            lnf_rstd,
            logits,
        })
    }

    fn check_point(&self, point: CapturePoint) -> Result<()> {
        match point {
            CapturePoint::ResidPost(l) if l >= self.cfg.n_layers => {
                Err(param_err(format!("unknown capture point {point}")))
            }
            _ => Ok(()),
        }
    }

    /// Logits, `b x t x V`.
    pub fn forward(&self, tokens: &[usize], b: usize, t: usize) -> Result<Vec<S>> {
        self.check_input(tokens, b, t)?;
        let mut logits = Vec::with_capacity(b * t * self.cfg.vocab);
        for (chunk, nb) in chunks(tokens, t) {
            logits.extend(self.run(chunk, nb, t, None)?.logits);
        }
        Ok(logits)
    }

    /// Logits plus activations at every capture point.
    pub fn forward_with_capture(&self, tokens: &[usize], b: usize, t: usize) -> Result<(Vec<S>, ActivationCapture)> {
        self.check_input(tokens, b, t)?;
        let d = self.cfg.d_model;
        let mut logits = Vec::with_capacity(b * t * self.cfg.vocab);
        let mut cap = ActivationCapture {
            n: b,
            len: t,
            d_model: d,
            points: CapturePoint::all(self.cfg.n_layers)
                .into_iter()
                .map(|p| (p, Vec::with_capacity(b * t * d)))
                .collect(),
        };
        let to_f32 = |x: &[S]| x.iter().map(|v| v.to_f64_lossy() as f32).collect::<Vec<f32>>();
        for (chunk, nb) in chunks(tokens, t) {
            let c = self.run(chunk, nb, t, None)?;
            let pts = &mut cap.points;
            pts.get_mut(&CapturePoint::EmbedOut).unwrap().extend(to_f32(&c.embed));
            for (l, bc) in c.blocks.iter().enumerate() {
                pts.get_mut(&CapturePoint::ResidPost(l)).unwrap().extend(to_f32(&bc.out));
            }
            pts.get_mut(&CapturePoint::FinalLn).unwrap().extend(to_f32(&c.lnf));
            logits.extend(c.logits);
        }
        Ok((logits, cap))
    }

    /// Forward pass with the activation at `(point, pos)` replaced by `vector`
    /// in every sequence. `pos` is clipped to the last position.
    pub fn patched_forward(
        &self,
        tokens: &[usize],
        b: usize,
        t: usize,
        point: CapturePoint,
        pos: usize,
        vector: &[S],
    ) -> Result<Vec<S>> {
        self.check_point(point)?;
        self.check_input(tokens, b, t)?;
        if vector.len() != self.cfg.d_model {
            return Err(MctError::Shape {
                op: "patched_forward(vector)",
                left: vec![self.cfg.d_model],
                right: vec![vector.len()],
            });
        }
        let patch = Patch {
            point,
            pos: pos.min(t.saturating_sub(1)),
            vector,
        };
        let mut logits = Vec::with_capacity(b * t * self.cfg.vocab);
        for (chunk, nb) in chunks(tokens, t) {
            logits.extend(self.run(chunk, nb, t, Some(&patch))?.logits);
        }
        Ok(logits)
    }

    /// Continues a forward pass from given activations at `point`
    /// (`b x t x d_model`) and returns the logits. Combined with
    /// [`Model::forward_with_capture`] this evaluates many patches of one
    /// batch without recomputing the prefix.
    pub fn resume_from(&self, point: CapturePoint, acts: &[S], b: usize, t: usize) -> Result<Vec<S>> {
        self.check_point(point)?;
        let d = self.cfg.d_model;
        if acts.len() != b * t * d {
            return Err(MctError::Shape {
                op: "resume_from(acts)",
                left: vec![b, t, d],
                right: vec![acts.len()],
            });
        }
        let n = b * t;
        if point == CapturePoint::FinalLn {
            return self.unembed(acts, n);
        }
        let start = match point {
            CapturePoint::EmbedOut => 0,
            CapturePoint::ResidPost(l) => l + 1,
            CapturePoint::FinalLn => unreachable!(),
        };
        let mut x = acts.to_vec();
        for l in start..self.cfg.n_layers {
            x = self.block_forward(l, &x, b, t)?.out;
        }
        let (lnf, _, _) = self.final_ln(&x, n)?;
        self.unembed(&lnf, n)
    }

    /// Mean next-token cross-entropy over positions `0..t-1`.
    pub fn loss(&self, tokens: &[usize], b: usize, t: usize) -> Result<f64> {
        self.check_input(tokens, b, t)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (chunk, nb) in chunks(tokens, t) {
            let c = self.run(chunk, nb, t, None)?;
            let targets = next_token_targets(chunk, nb, t);
            let (l, _) = ops::cross_entropy_mean_forward(&c.logits, &targets, self.cfg.vocab)?;
            let k = targets.iter().filter(|x| x.is_some()).count();
            total += l * k as f64;
            count += k;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// Loss and gradient of every parameter, in store order.
    pub fn loss_and_grads(&self, tokens: &[usize], b: usize, t: usize) -> Result<(f64, Vec<Vec<S>>)> {
        let cache = self.run(tokens, b, t, None)?;
        let (d, v) = (self.cfg.d_model, self.cfg.vocab);
        let n = b * t;
        let targets = next_token_targets(tokens, b, t);
        let (loss, probs) = ops::cross_entropy_mean_forward(&cache.logits, &targets, v)?;
        let mut grads: Vec<Vec<S>> = self.params.params().iter().map(|p| vec![S::zero(); p.value.len()]).collect();

        let mut dlogits = vec![S::zero(); n * v];
        ops::cross_entropy_mean_backward(&mut dlogits, &probs, &targets, v);
        let mut dlnf = vec![S::zero(); n * d];
        {
            let [gw, gb] = grads.get_disjoint_mut([self.layout.w_u, self.layout.b_u]).expect("distinct");
            ops::matmul_backward(Some(&mut dlnf), gw, Some(gb), &dlogits, &cache.lnf, self.w(self.layout.w_u), (n, d, v));
        }
        let last = cache.blocks.last().map_or(cache.embed.as_slice(), |c| c.out.as_slice());
        let mut dx = vec![S::zero(); n * d];
        {
            let [gg, gb] = grads.get_disjoint_mut([self.layout.lnf_g, self.layout.lnf_b]).expect("distinct");
            ops::layernorm_backward(
                &mut dx,
                gg,
                gb,
                &dlnf,
                last,
                &cache.lnf_mean,
                &cache.lnf_rstd,
                self.w(self.layout.lnf_g),
                (n, d),
            );
        }
        for l in (0..self.cfg.n_layers).rev() {
            let input = if l == 0 { &cache.embed } else { &cache.blocks[l - 1].out };
            dx = self.block_backward(l, input, &cache.blocks[l], &dx, &mut grads, b, t);
        }
        ops::embed_gather_backward(&mut grads[self.layout.tok], &dx, tokens, d);
        let gpos = &mut grads[self.layout.pos];
        for s in 0..b {
            for p in 0..t {
                let r = (s * t + p) * d;
                for j in 0..d {
                    gpos[p * d + j] = gpos[p * d + j] + dx[r + j];
                }
            }
        }
        Ok((loss, grads))
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        l: usize,
        input: &[S],
        c: &BlockCache<S>,
        dout: &[S],
        grads: &mut [Vec<S>],
        b: usize,
        t: usize,
    ) -> Vec<S> {
        let bl = self.layout.blocks[l];
        let (d, f, h) = (self.cfg.d_model, self.cfg.d_mlp, self.cfg.n_heads);
        let hd = d / h;
        let n = b * t;

        // MLP branch: out = mid + gelu(ln2(mid) W_in + b_in) W_out + b_out
        let mut dmid = dout.to_vec();
        let mut dh_act = vec![S::zero(); n * f];
        {
            let [gw, gb] = grads.get_disjoint_mut([bl.w_out, bl.b_out]).expect("distinct");
            ops::matmul_backward(Some(&mut dh_act), gw, Some(gb), dout, &c.h_act, self.w(bl.w_out), (n, f, d));
        }
        let mut dh_pre = vec![S::zero(); n * f];
        ops::gelu_backward(&mut dh_pre, &dh_act, &c.h_pre);
        let mut dln2 = vec![S::zero(); n * d];
        {
            let [gw, gb] = grads.get_disjoint_mut([bl.w_in, bl.b_in]).expect("distinct");
            ops::matmul_backward(Some(&mut dln2), gw, Some(gb), &dh_pre, &c.ln2, self.w(bl.w_in), (n, d, f));
        }
        {
            let [gg, gb] = grads.get_disjoint_mut([bl.ln2_g, bl.ln2_b]).expect("distinct");
            ops::layernorm_backward(
                &mut dmid,
                gg,
                gb,
                &dln2,
                &c.mid,
                &c.ln2_mean,
                &c.ln2_rstd,
                self.w(bl.ln2_g),
                (n, d),
            );
        }

        // Attention branch: mid = input + attn(ln1(input)) W_o + b_o
        let mut dinput = dmid.clone();
        let mut datt_out = vec![S::zero(); n * d];
        {
            let [gw, gb] = grads.get_disjoint_mut([bl.wo, bl.bo]).expect("distinct");
            ops::matmul_backward(Some(&mut datt_out), gw, Some(gb), &dmid, &c.att_out, self.w(bl.wo), (n, d, d));
        }
        let (mut dq, mut dk, mut dv) = (vec![S::zero(); n * d], vec![S::zero(); n * d], vec![S::zero(); n * d]);
        let scale = S::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let mut dp = vec![S::zero(); t * t];
        let mut ds = vec![S::zero(); t * t];
        for s in 0..b {
            for head in 0..h {
                let off = s * t * d + head * hd;
                let a_off = (s * h + head) * t * t;
                let att = &c.att[a_off..a_off + t * t];
                // dP = dO V^T
                crate::nn::gemm(t, hd, t, S::one(), &datt_out[off..], (d, 1), &c.v[off..], (1, d), S::zero(), &mut dp, (t, 1));
                // dV += P^T dO
                crate::nn::gemm(t, t, hd, S::one(), att, (1, t), &datt_out[off..], (d, 1), S::one(), &mut dv[off..], (d, 1));
                ds.iter_mut().for_each(|x| *x = S::zero());
                ops::softmax_rows_backward(&mut ds, &dp, att, (t, t));
                ops::causal_mask_backward(&mut ds, t);
                // dQ += scale dS K ; dK += scale dS^T Q
                crate::nn::gemm(t, t, hd, scale, &ds, (t, 1), &c.k[off..], (d, 1), S::one(), &mut dq[off..], (d, 1));
                crate::nn::gemm(t, t, hd, scale, &ds, (1, t), &c.q[off..], (d, 1), S::one(), &mut dk[off..], (d, 1));
            }
        }
        let mut dln1 = vec![S::zero(); n * d];
        for (dy, w, bias) in [(&dq, bl.wq, bl.bq), (&dk, bl.wk, bl.bk), (&dv, bl.wv, bl.bv)] {
            let [gw, gb] = grads.get_disjoint_mut([w, bias]).expect("distinct");
            ops::matmul_backward(Some(&mut dln1), gw, Some(gb), dy, &c.ln1, self.w(w), (n, d, d));
        }
        {
            let [gg, gb] = grads.get_disjoint_mut([bl.ln1_g, bl.ln1_b]).expect("distinct");
            ops::layernorm_backward(
                &mut dinput,
                gg,
                gb,
                &dln1,
                input,
                &c.ln1_mean,
                &c.ln1_rstd,
                self.w(bl.ln1_g),
                (n, d),
            );
        }
        dinput
    }
}

/// `scores = scale * Q K^T` for one head; `q`, `k` start at the head offset
/// with row stride `d`.
fn gemm_qkt<S: Scalar>(q: &[S], k: &[S], scores: &mut [S], t: usize, hd: usize, d: usize, scale: S) {
    crate::nn::gemm(t, hd, t, scale, q, (d, 1), k, (1, d), S::zero(), scores, (t, 1));
}

/// Splits `tokens` into chunks of at most `EVAL_CHUNK` whole sequences.
fn chunks(tokens: &[usize], t: usize) -> impl Iterator<Item = (&[usize], usize)> {
    let t = t.max(1);
    tokens.chunks(EVAL_CHUNK * t).map(move |c| (c, c.len() / t))
}

fn next_token_targets(tokens: &[usize], b: usize, t: usize) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(b * t);
    for s in 0..b {
        for p in 0..t {
            out.push((p + 1 < t).then(|| tokens[s * t + p + 1]));
        }
    }
    out
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay; 1.0 disables decay.
    pub final_lr_frac: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_steps: 200,
            batch_size: 64,
            epochs: 15,
            grad_clip: 1.0,
            final_lr_frac: 1.0,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.final_lr_frac >= 1.0 || total <= self.warmup_steps {
            return self.lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (total - self.warmup_steps) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub val_loss: f64,
    pub bayes_loss: f64,
    /// `val_loss - bayes_loss`; may be slightly negative from sampling noise.
    pub excess: f64,
    /// Excess above 0.1 nats.
    pub flagged: bool,
    pub steps: usize,
}

impl<S: Scalar> Model<S> {
    /// Next-token training with Adam, global-norm clipping and linear warmup.
    pub fn train(&mut self, train: &SequenceBatch, val: &SequenceBatch, hyper: &TrainHyper) -> Result<TrainReport> {
        self.train_with_progress(train, val, hyper, |_, _| {})
    }

    pub fn train_with_progress(
        &mut self,
        train: &SequenceBatch,
        val: &SequenceBatch,
        hyper: &TrainHyper,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<TrainReport> {
        if train.v != self.cfg.vocab || val.v != self.cfg.vocab || train.len != val.len {
            return Err(param_err("train/val batches do not match the model vocabulary or length"));
        }
        if hyper.batch_size == 0 {
            return Err(param_err("batch_size must be positive"));
        }
        if !(hyper.lr > 0.0 && hyper.lr.is_finite()) {
            return Err(param_err("learning rate must be positive and finite"));
        }
        let t = train.len;
        let steps_per_epoch = train.n.div_ceil(hyper.batch_size);
        let total = steps_per_epoch * hyper.epochs;
        let adam = AdamConfig::default();
        let mut order: Vec<usize> = (0..train.n).collect();
        let mut rng = rng::stream(hyper.seed, Stream::Shuffle);
        let mut step = 0usize;
        let mut epoch_losses = Vec::with_capacity(hyper.epochs);
        let mut batch = Vec::with_capacity(hyper.batch_size * t);
        for epoch in 0..hyper.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for idx in order.chunks(hyper.batch_size) {
                batch.clear();
                for &s in idx {
                    batch.extend_from_slice(train.tokens(s));
                }
                let (loss, grads) = self.loss_and_grads(&batch, idx.len(), t)?;
                if !loss.is_finite() {
                    return Err(MctError::Diverged { epoch, loss });
                }
                sum += loss;
                self.params.accumulate_grads(&grads)?;
                self.params.clip_grad_norm(hyper.grad_clip);
                self.params.adam_step(hyper.lr_at(step, total), &adam);
                step += 1;
            }
            let mean = sum / steps_per_epoch as f64;
            on_epoch(epoch, mean);
            epoch_losses.push(mean);
        }
        let val_loss = self.loss(&val.tokens, val.n, val.len)?;
        if !val_loss.is_finite() {
            return Err(MctError::Diverged {
                epoch: hyper.epochs,
                loss: val_loss,
            });
        }
        let bayes_loss = bayes_optimal_loss(val);
        let excess = val_loss - bayes_loss;
        Ok(TrainReport {
            epoch_train_loss: epoch_losses,
            val_loss,
            bayes_loss,
            excess,
            flagged: excess > 0.1,
            steps: step,
        })
    }
}

/// Row-wise softmax of `logits` (`n x v`) in `f64`.
pub fn softmax_f64<S: Scalar>(logits: &[S], v: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(v) {
        let max = row.iter().map(|x| x.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x.to_f64_lossy() - max).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|x| x / s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 1,
            d_mlp: 16,
            max_len: 5,
            vocab: 4,
            seed,
        }
    }

    fn tokens(n: usize, t: usize, v: usize, seed: u64) -> Vec<usize> {
        use rand::Rng as _;
        let mut r = rng::stream(seed, Stream::Sequences);
        (0..n * t).map(|_| r.random_range(0..v)).collect()
    }

    #[test]
    fn benchmark_parameter_count() {
        for v in [5, 6, 8] {
            let m = Model::<f32>::build(ModelConfig::benchmark(v, 0)).unwrap();
            let n = m.num_params();
            assert!((240_000..=310_000).contains(&n), "V={v}: {n}");
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(micro(3)).unwrap();
        let b = Model::<f32>::build(micro(3)).unwrap();
        for (p, q) in a.params().params().iter().zip(b.params().params()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn rejects_bad_config_and_tokens() {
        let mut cfg = micro(0);
        cfg.n_heads = 3;
        assert!(Model::<f32>::build(cfg).is_err());
        let m = Model::<f32>::build(micro(0)).unwrap();
        assert!(matches!(m.forward(&[0, 1, 9], 1, 3), Err(MctError::Input(_))));
        assert!(matches!(m.forward(&[0; 6], 1, 6), Err(MctError::Input(_))));
        assert!(m.patched_forward(&[0; 3], 1, 3, CapturePoint::ResidPost(2), 0, &[0.0; 8]).is_err());
    }

    #[test]
    fn capture_point_names() {
        for p in CapturePoint::all(2) {
            assert_eq!(p.to_string().parse::<CapturePoint>().unwrap(), p);
        }
        assert_eq!(CapturePoint::ResidPost(1).to_string(), "resid_post_1");
        assert!("resid_post_x".parse::<CapturePoint>().is_err());
    }

    #[test]
    fn full_model_gradient_check() {
        let model = Model::<f64>::build(micro(11)).unwrap();
        // Larger init so every path carries signal.
        let mut model = model;
        for p in model.params_mut().params_mut() {
            for x in p.value.data_mut() {
                *x *= 20.0;
            }
        }
        let model = model;
        let (b, t) = (3, 5);
        let toks = tokens(b, t, 4, 2);
        let (_, grads) = model.loss_and_grads(&toks, b, t).unwrap();
        let h = 1e-5;
        for (pi, p) in model.params().params().iter().enumerate() {
            let mut numeric = vec![0.0; p.value.len()];
            for j in 0..p.value.len() {
                let mut m = model.clone();
                m.params_mut().params_mut()[pi].value.data_mut()[j] += h;
                let lp = m.loss(&toks, b, t).unwrap();
                m.params_mut().params_mut()[pi].value.data_mut()[j] -= 2.0 * h;
                let lm = m.loss(&toks, b, t).unwrap();
                numeric[j] = (lp - lm) / (2.0 * h);
            }
            let a = &grads[pi];
            let num: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
            // Key biases shift every score in a row equally, so their true gradient is zero.
            let rel = if num < 1e-8 { 0.0 } else { num / den };
            assert!(rel < 1e-3, "{}: rel err {rel}", p.name);
        }
    }

    #[test]
    fn suffix_perturbation_leaves_prefix_logits() {
        let m = Model::<f32>::build(micro(4)).unwrap();
        let mut toks = tokens(2, 5, 4, 9);
        let base = m.forward(&toks, 2, 5).unwrap();
        toks[3] = (toks[3] + 1) % 4;
        toks[5 + 3] = (toks[5 + 3] + 2) % 4;
        let pert = m.forward(&toks, 2, 5).unwrap();
        for s in 0..2 {
            for p in 0..3 {
                let r = (s * 5 + p) * 4;
                assert_eq!(base[r..r + 4], pert[r..r + 4]);
            }
        }
    }

    #[test]
    fn identity_patch_is_a_no_op() {
        let m = Model::<f32>::build(micro(5)).unwrap();
        let toks = tokens(1, 5, 4, 3);
        let (logits, cap) = m.forward_with_capture(&toks, 1, 5).unwrap();
        for point in CapturePoint::all(2) {
            let vec = cap.vector(point, 0, 2).unwrap().to_vec();
            let patched = m.patched_forward(&toks, 1, 5, point, 2, &vec).unwrap();
            for (a, b) in logits.iter().zip(&patched) {
                assert!((a - b).abs() < 1e-6, "{point}");
            }
            let resumed = m.resume_from(point, cap.get(point).unwrap(), 1, 5).unwrap();
            for (a, b) in logits.iter().zip(&resumed) {
                assert!((a - b).abs() < 1e-5, "{point}");
            }
        }
    }

    #[test]
    fn patch_changes_only_later_positions() {
        let m = Model::<f32>::build(micro(6)).unwrap();
        let toks = tokens(2, 5, 4, 4);
        let base = m.forward(&toks, 2, 5).unwrap();
        let vec = vec![3.0f32; 8];
        let patched = m.patched_forward(&toks, 2, 5, CapturePoint::ResidPost(0), 2, &vec).unwrap();
        for s in 0..2 {
            for p in 0..5 {
                let r = (s * 5 + p) * 4;
                if p < 2 {
                    assert_eq!(base[r..r + 4], patched[r..r + 4]);
                } else if p == 2 {
                    assert_ne!(base[r..r + 4], patched[r..r + 4]);
                }
            }
        }
        // Out-of-range position is clipped to the last one.
        let clipped = m.patched_forward(&toks, 2, 5, CapturePoint::FinalLn, 99, &vec).unwrap();
        let last = m.patched_forward(&toks, 2, 5, CapturePoint::FinalLn, 4, &vec).unwrap();
        assert_eq!(clipped, last);
    }

    #[test]
    fn untrained_loss_near_ln_v() {
        let cfg = ModelConfig::benchmark(6, 1);
        let m = Model::<f32>::build(cfg).unwrap();
        let toks = tokens(4, 64, 6, 1);
        let (logits, cap) = m.forward_with_capture(&toks, 4, 64).unwrap();
        assert_eq!(logits.len(), 4 * 64 * 6);
        for p in CapturePoint::all(2) {
            assert_eq!(cap.get(p).unwrap().len(), 4 * 64 * 128);
        }
        let loss = m.loss(&toks, 4, 64).unwrap();
        assert!((loss - 6f64.ln()).abs() < 0.05, "{loss}");
    }

    #[test]
    fn memorizes_a_tiny_batch() {
        use crate::hmm::{build_family, sample_sequences};
        let spec = build_family(crate::Family::Easy, 0).unwrap();
        let train = sample_sequences(&spec, 10, 16, 1).unwrap();
        let mut cfg = ModelConfig::benchmark(6, 2);
        cfg.max_len = 16;
        cfg.d_model = 64;
        cfg.d_mlp = 128;
        let mut m = Model::<f32>::build(cfg).unwrap();
        let hyper = TrainHyper {
            lr: 3e-3,
            warmup_steps: 50,
            batch_size: 10,
            epochs: 2000,
            ..TrainHyper::default()
        };
        let report = m.train(&train, &train, &hyper).unwrap();
        assert!(report.val_loss < 0.1 * 6f64.ln(), "{}", report.val_loss);
    }
}
