//! Minimal binary array files: magic, dtype tag, shape, little-endian data.
//!
//! Layout: `MCTARR01`, `u8` dtype (0 = f32, 1 = f64, 2 = u32), `u32` ndim,
//! `u64` per dimension, then the elements.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MctError, Result};

pub const ARRAY_MAGIC: &[u8; 8] = b"MCTARR01";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U32(_) => 2,
        }
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(MctError::Shape {
                op: "Array::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Labels stored as `u32`.
    pub fn labels(shape: Vec<usize>, labels: &[usize]) -> Result<Self> {
        let data = labels
            .iter()
            .map(|&x| u32::try_from(x).map_err(|_| MctError::Format(format!("label {x} exceeds u32"))))
            .collect::<Result<Vec<u32>>>()?;
        Self::new(shape, ArrayData::U32(data))
    }

    pub fn to_labels(&self) -> Result<Vec<usize>> {
        match &self.data {
            ArrayData::U32(v) => Ok(v.iter().map(|&x| x as usize).collect()),
            _ => Err(MctError::Format("array does not hold labels".into())),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            ArrayData::F64(v) => v.clone(),
            ArrayData::U32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(ARRAY_MAGIC)?;
        w.write_all(&[self.data.tag()])?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match &self.data {
            ArrayData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArrayData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            ArrayData::U32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ARRAY_MAGIC {
            return Err(MctError::Format("not an array file (bad magic)".into()));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let ndim = u32::from_le_bytes(b4) as usize;
        if ndim > 8 {
            return Err(MctError::Format(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut b8 = [0u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut b8)?;
            shape.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| MctError::Format("dimension overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| MctError::Format("shape overflow".into()))?;
        let data = match tag[0] {
            0 => ArrayData::F32(read_elems(r, n, f32::from_le_bytes)?),
            1 => ArrayData::F64(read_elems(r, n, f64::from_le_bytes)?),
            2 => ArrayData::U32(read_elems(r, n, u32::from_le_bytes)?),
            t => return Err(MctError::Format(format!("unknown dtype tag {t}"))),
        };
        Self::new(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_elems<T, const N: usize>(r: &mut impl Read, n: usize, conv: fn([u8; N]) -> T) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(n.min(1 << 24));
    let mut buf = [0u8; N];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(conv(buf));
    }
    Ok(out)
}
