//! `ZMDT` tensor container.
//!
//! Layout (little-endian): magic `ZMDT`, u16 version, u8 dtype code
//! (`f32 = 1`, `f64 = 2`), u8 rank, `rank` u64 dimensions, then the payload in
//! row-major order.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ZMDT";
pub const TENSOR_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch { expected: shape, got: vec![data.len()] });
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::invalid("tensor rank exceeds 255"));
        }
        Ok(Self { shape, data })
    }
}

pub fn write_tensor_to<W: Write>(t: &StoredTensor, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&[t.data.code(), t.shape.len() as u8])?;
    for &d in &t.shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    match &t.data {
        TensorData::F32(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
        TensorData::F64(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
    }
    out.flush()?;
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, t: &StoredTensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor_to(t, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor_bytes(buf: &[u8]) -> Result<StoredTensor> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::BadMagic { expected: "tensor" });
    }
    if buf.len() < 8 {
        return Err(Error::Truncated("tensor header".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != TENSOR_VERSION {
        return Err(Error::Version { what: "tensor", found: version, expected: TENSOR_VERSION });
    }
    let (code, rank) = (buf[6], buf[7] as usize);
    let mut pos = 8;
    if buf.len() < pos + 8 * rank {
        return Err(Error::Truncated("tensor dimensions".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()) as usize);
        pos += 8;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?;
    let width = match code {
        1 => 4,
        2 => 8,
        c => return Err(Error::Corrupt(format!("unknown dtype code {c}"))),
    };
    let payload = &buf[pos..];
    let need = n.checked_mul(width).ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?;
    if payload.len() < need {
        return Err(Error::Truncated(format!("tensor payload: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(Error::Corrupt(format!("{} trailing bytes", payload.len() - need)));
    }
    let data = if code == 1 {
        TensorData::F32(payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    } else {
        TensorData::F64(payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    };
    Ok(StoredTensor { shape, data })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    read_tensor_bytes(&std::fs::read(path)?)
}
