use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{MctError, Result};

/// First eight bytes of every checkpoint file; the trailing digit is the format version.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCTCKPT1";

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    /// Adam first moment.
    pub m: Tensor<S>,
    /// Adam second moment.
    pub v: Tensor<S>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable tensors in insertion order, each with its gradient and
/// Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
            step: 0,
        }
    }

    /// Registers a parameter and returns its slot index.
    pub fn insert(&mut self, name: &str, value: Tensor<S>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(MctError::Parameter(format!("duplicate parameter '{name}'")));
        }
        let shape = value.shape().to_vec();
        let idx = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
        });
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| MctError::Parameter(format!("unknown parameter '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Param<S>> {
        Ok(&self.params[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<S>> {
        let i = self.index_of(name)?;
        Ok(&mut self.params[i])
    }

    pub fn value(&self, idx: usize) -> &[S] {
        self.params[idx].value.data()
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    /// Adds `grads[i]` into the gradient of slot `i`.
    pub fn accumulate_grads(&mut self, grads: &[Vec<S>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(MctError::Shape {
                op: "accumulate_grads",
                left: vec![self.params.len()],
                right: vec![grads.len()],
            });
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if g.len() != p.grad.len() {
                return Err(MctError::Shape {
                    op: "accumulate_grads",
                    left: p.grad.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            for (a, &b) in p.grad.data_mut().iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| {
                let g = g.to_f64_lossy();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = S::from_f64_lossy(max_norm / norm);
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g = *g * scale);
            }
        }
        norm
    }

    /// One bias-corrected Adam update on every parameter, then zero the gradients.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (S::from_f64_lossy(cfg.beta1), S::from_f64_lossy(cfg.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let step_size = S::from_f64_lossy(lr / bc1);
        let inv_bc2 = S::from_f64_lossy(1.0 / bc2);
        let eps = S::from_f64_lossy(cfg.eps);
        for p in &mut self.params {
            let Param { value, grad, m, v, .. } = p;
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut().iter_mut())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + one_b1 * *g;
                *v = b2 * *v + one_b2 * *g * *g;
                let vhat = *v * inv_bc2;
                *w = *w - step_size * *m / (vhat.sqrt() + eps);
                *g = S::zero();
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    m: p.m.cast(),
                    v: p.v.cast(),
                })
                .collect(),
            index: self.index.clone(),
            step: self.step,
        }
    }

    /// Checkpoint layout (little-endian):
    /// `magic[8] | u32 count | count x (u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 data[prod(dims)])`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.value.len() * 4);
            for x in p.value.data() {
                buf.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(MctError::Format(format!("bad magic {magic:?}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| MctError::Format(e.to_string()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| S::from_f64_lossy(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
                .collect();
            store.insert(&name, Tensor::from_vec(&shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[1], vec![w]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.7);
        s.adam_step(0.1, &AdamConfig::default());
        assert_eq!(s.get("w").unwrap().value.data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        s.get_mut("w").unwrap().grad.data_mut()[0] = -3.0;
        s.adam_step(0.01, &AdamConfig::default());
        let w = s.get("w").unwrap();
        assert!((w.value.data()[0] - 1.01).abs() < 1e-8);
        assert_eq!(w.grad.data()[0], 0.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = scalar_store(1.0);
        for _ in 0..500 {
            let w = s.get("w").unwrap().value.data()[0];
            s.get_mut("w").unwrap().grad.data_mut()[0] = 2.0 * w;
            s.adam_step(0.05, &AdamConfig::default());
        }
        assert!(s.get("w").unwrap().value.data()[0].abs() < 1e-2);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        s.get_mut("a").unwrap().grad.data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let mut s = ParamStore::<f32>::new();
        s.insert("block0.attn.wq", Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap())
            .unwrap();
        s.insert("bias", Tensor::from_vec(&[3], vec![0.5, 0.25, -1.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::<f32>::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["block0.attn.wq", "bias"]);
        assert_eq!(back.get("block0.attn.wq").unwrap().value, s.get("block0.attn.wq").unwrap().value);
        buf[0] = b'X';
        assert!(matches!(
            ParamStore::<f32>::read_checkpoint(buf.as_slice()),
            Err(MctError::Format(_))
        ));
    }
}
