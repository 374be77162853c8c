//! Forward/backward pairs for the closed primitive set.
//!
//! Shapes are passed explicitly; all buffers are row-major. Backward
//! functions accumulate (`+=`) into input gradients so shared inputs can
//! collect contributions from several consumers.

use super::{gemm, Scalar};
use crate::error::{MctError, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(MctError::Shape {
            op,
            left: vec![want],
            right: vec![got],
        })
    }
}

/// `out[n,o] = inp[n,i] w[i,o] + bias[o]`.
pub fn matmul_forward<S: Scalar>(
    out: &mut [S],
    inp: &[S],
    w: &[S],
    bias: Option<&[S]>,
    (n, i, o): (usize, usize, usize),
) -> Result<()> {
    check_len("matmul(inp)", inp.len(), n * i)?;
    check_len("matmul(w)", w.len(), i * o)?;
    check_len("matmul(out)", out.len(), n * o)?;
    match bias {
        Some(b) => {
            check_len("matmul(bias)", b.len(), o)?;
            for row in out.chunks_mut(o) {
                row.copy_from_slice(b);
            }
            gemm(n, i, o, S::one(), inp, (i, 1), w, (o, 1), S::one(), out, (o, 1));
        }
        None => gemm(n, i, o, S::one(), inp, (i, 1), w, (o, 1), S::zero(), out, (o, 1)),
    }
    Ok(())
}

/// Accumulates `dinp += dout w^T`, `dw += inp^T dout`, `dbias += sum_rows dout`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<S: Scalar>(
    dinp: Option<&mut [S]>,
    dw: &mut [S],
    dbias: Option<&mut [S]>,
    dout: &[S],
    inp: &[S],
    w: &[S],
    (n, i, o): (usize, usize, usize),
) {
    if let Some(dinp) = dinp {
        gemm(n, o, i, S::one(), dout, (o, 1), w, (1, o), S::one(), dinp, (i, 1));
    }
    gemm(i, n, o, S::one(), inp, (1, i), dout, (o, 1), S::one(), dw, (o, 1));
    if let Some(db) = dbias {
        for row in dout.chunks(o) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d = *d + g;
            }
        }
    }
}

pub fn add_forward<S: Scalar>(out: &mut [S], a: &[S], b: &[S]) -> Result<()> {
    check_len("add(a)", a.len(), out.len())?;
    check_len("add(b)", b.len(), out.len())?;
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = x + y;
    }
    Ok(())
}

/// `acc += other`.
pub fn add_forward_inplace<S: Scalar>(acc: &mut [S], other: &[S]) {
    for (a, &b) in acc.iter_mut().zip(other) {
        *a = *a + b;
    }
}

pub fn add_backward<S: Scalar>(da: &mut [S], db: &mut [S], dout: &[S]) {
    for ((a, b), &g) in da.iter_mut().zip(db.iter_mut()).zip(dout) {
        *a = *a + g;
        *b = *b + g;
    }
}

/// Per-row layer normalization with affine `gamma`, `beta`.
/// Stores the per-row mean and reciprocal standard deviation for backward.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_forward<S: Scalar>(
    out: &mut [S],
    mean: &mut [S],
    rstd: &mut [S],
    inp: &[S],
    gamma: &[S],
    beta: &[S],
    (n, c): (usize, usize),
) -> Result<()> {
    check_len("layernorm(inp)", inp.len(), n * c)?;
    check_len("layernorm(gamma)", gamma.len(), c)?;
    check_len("layernorm(beta)", beta.len(), c)?;
    for r in 0..n {
        let x = &inp[r * c..(r + 1) * c];
        let mu = x.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / c as f64;
        let var = x
            .iter()
            .map(|v| {
                let d = v.to_f64_lossy() - mu;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
        let (mu_s, rs_s) = (S::from_f64_lossy(mu), S::from_f64_lossy(rs));
        for j in 0..c {
            out[r * c + j] = (x[j] - mu_s) * rs_s * gamma[j] + beta[j];
        }
        mean[r] = mu_s;
        rstd[r] = rs_s;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<S: Scalar>(
    dinp: &mut [S],
    dgamma: &mut [S],
    dbeta: &mut [S],
    dout: &[S],
    inp: &[S],
    mean: &[S],
    rstd: &[S],
    gamma: &[S],
    (n, c): (usize, usize),
) {
    let cf = S::from_usize(c).unwrap_or_else(S::one);
    for r in 0..n {
        let x = &inp[r * c..(r + 1) * c];
        let g = &dout[r * c..(r + 1) * c];
        let (mu, rs) = (mean[r], rstd[r]);
        let mut dnorm_mean = S::zero();
        let mut dnorm_norm_mean = S::zero();
        for j in 0..c {
            let norm = (x[j] - mu) * rs;
            let dnorm = g[j] * gamma[j];
            dnorm_mean = dnorm_mean + dnorm;
            dnorm_norm_mean = dnorm_norm_mean + dnorm * norm;
        }
        dnorm_mean = dnorm_mean / cf;
        dnorm_norm_mean = dnorm_norm_mean / cf;
        let dx = &mut dinp[r * c..(r + 1) * c];
        for j in 0..c {
            let norm = (x[j] - mu) * rs;
            let dnorm = g[j] * gamma[j];
            dgamma[j] = dgamma[j] + g[j] * norm;
            dbeta[j] = dbeta[j] + g[j];
            dx[j] = dx[j] + (dnorm - dnorm_mean - norm * dnorm_norm_mean) * rs;
        }
    }
}

/// Row-wise softmax. `-inf` entries receive probability zero.
pub fn softmax_rows_forward<S: Scalar>(out: &mut [S], inp: &[S], (n, c): (usize, usize)) -> Result<()> {
    check_len("softmax(inp)", inp.len(), n * c)?;
    check_len("softmax(out)", out.len(), n * c)?;
    for r in 0..n {
        let x = &inp[r * c..(r + 1) * c];
        let max = x.iter().copied().fold(S::neg_infinity(), S::max);
        let y = &mut out[r * c..(r + 1) * c];
        let mut sum = S::zero();
        for (o, &v) in y.iter_mut().zip(x) {
            *o = if v == S::neg_infinity() { S::zero() } else { (v - max).exp() };
            sum = sum + *o;
        }
        let inv = S::one() / sum;
        y.iter_mut().for_each(|o| *o = *o * inv);
    }
    Ok(())
}

/// `dinp += p * (dout - <dout, p>)` per row, given the forward output `p`.
pub fn softmax_rows_backward<S: Scalar>(dinp: &mut [S], dout: &[S], out: &[S], (n, c): (usize, usize)) {
    for r in 0..n {
        let p = &out[r * c..(r + 1) * c];
        let g = &dout[r * c..(r + 1) * c];
        let dot = p.iter().zip(g).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
        for j in 0..c {
            dinp[r * c + j] = dinp[r * c + j] + p[j] * (g[j] - dot);
        }
    }
}

/// Sets strictly-future entries of a `t x t` score block to `-inf`.
pub fn causal_mask_forward<S: Scalar>(scores: &mut [S], t: usize) {
    for i in 0..t {
        for j in i + 1..t {
            scores[i * t + j] = S::neg_infinity();
        }
    }
}

/// Masked entries are constants: their gradient is zeroed.
pub fn causal_mask_backward<S: Scalar>(dscores: &mut [S], t: usize) {
    for i in 0..t {
        for j in i + 1..t {
            dscores[i * t + j] = S::zero();
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_forward<S: Scalar>(out: &mut [S], inp: &[S]) {
    let (k, c3, two) = (
        S::from_f64_lossy(GELU_SCALE),
        S::from_f64_lossy(GELU_CUBIC),
        S::from_f64_lossy(2.0),
    );
    // 0.5 x (1 + tanh u) == x * sigmoid(2u); exp is far cheaper than tanh.
    for (o, &x) in out.iter_mut().zip(inp) {
        let u = k * (x + c3 * x * x * x);
        *o = x / (S::one() + (-two * u).exp());
    }
}

pub fn gelu_backward<S: Scalar>(dinp: &mut [S], dout: &[S], inp: &[S]) {
    let (k, c3, half, three) = (
        S::from_f64_lossy(GELU_SCALE),
        S::from_f64_lossy(GELU_CUBIC),
        S::from_f64_lossy(0.5),
        S::from_f64_lossy(3.0),
    );
    let two = S::from_f64_lossy(2.0);
    for ((d, &g), &x) in dinp.iter_mut().zip(dout).zip(inp) {
        let u = k * (x + c3 * x * x * x);
        let th = two / (S::one() + (-two * u).exp()) - S::one();
        let sech2 = S::one() - th * th;
        let local = half * (S::one() + th) + half * x * sech2 * k * (S::one() + three * c3 * x * x);
        *d = *d + g * local;
    }
}

/// `out[r] = table[ids[r]]`, rows of width `d`.
pub fn embed_gather_forward<S: Scalar>(out: &mut [S], table: &[S], ids: &[usize], d: usize) -> Result<()> {
    let rows = table.len() / d.max(1);
    for (r, &id) in ids.iter().enumerate() {
        if id >= rows {
            return Err(MctError::Input(format!("embedding index {id} >= {rows}")));
        }
        out[r * d..(r + 1) * d].copy_from_slice(&table[id * d..(id + 1) * d]);
    }
    Ok(())
}

pub fn embed_gather_backward<S: Scalar>(dtable: &mut [S], dout: &[S], ids: &[usize], d: usize) {
    for (r, &id) in ids.iter().enumerate() {
        for j in 0..d {
            dtable[id * d + j] = dtable[id * d + j] + dout[r * d + j];
        }
    }
}

/// Mean of `-ln softmax(logits)[target]` over rows that have a target.
/// Returns the loss and the softmax probabilities of every row.
pub fn cross_entropy_mean_forward<S: Scalar>(
    logits: &[S],
    targets: &[Option<usize>],
    v: usize,
) -> Result<(f64, Vec<S>)> {
    check_len("cross_entropy(logits)", logits.len(), targets.len() * v)?;
    let mut probs = vec![S::zero(); logits.len()];
    softmax_rows_forward(&mut probs, logits, (targets.len(), v))?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            // log-softmax in f64 from the logits directly for accuracy
            let row = &logits[r * v..(r + 1) * v];
            let max = row.iter().map(|x| x.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x.to_f64_lossy() - max).exp()).sum::<f64>().ln();
            total += lse - row[t].to_f64_lossy();
            count += 1;
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    Ok((loss, probs))
}

/// Writes `dlogits = (p - onehot) / count`; rows without target get zero.
pub fn cross_entropy_mean_backward<S: Scalar>(dlogits: &mut [S], probs: &[S], targets: &[Option<usize>], v: usize) {
    let count = targets.iter().filter(|t| t.is_some()).count().max(1);
    let inv = S::one() / S::from_usize(count).unwrap_or_else(S::one);
    for (r, t) in targets.iter().enumerate() {
        let d = &mut dlogits[r * v..(r + 1) * v];
        match *t {
            Some(t) => {
                for j in 0..v {
                    let y = if j == t { S::one() } else { S::zero() };
                    d[j] = (probs[r * v + j] - y) * inv;
                }
            }
            None => d.iter_mut().for_each(|x| *x = S::zero()),
        }
    }
}
