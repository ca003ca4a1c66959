//! FMAP tensor container.
//!
//! Layout: magic `FMAP`, version byte (1), dtype byte (0 = f32, 1 = f64),
//! rank byte, one little-endian `u32` per dimension, then the row-major
//! little-endian payload.

use std::path::Path;

use flowlens_core::{Precision, Real, Tensor};

use crate::error::{CliError, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const VERSION: u8 = 1;

/// A decoded tensor in whichever precision the file stored.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::F32(_) => Precision::F32,
            AnyTensor::F64(_) => Precision::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            AnyTensor::F32(t) => t.data().iter().map(|&v| v as f64).collect(),
            AnyTensor::F64(t) => t.data().to_vec(),
        }
    }

    /// Converts to `T`; exact when the stored precision already is `T`.
    pub fn cast<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::PRECISION {
            Precision::F32 => AnyTensor::F32(t.cast()),
            Precision::F64 => AnyTensor::F64(t.cast()),
        }
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + t.len() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(match T::PRECISION {
        Precision::F32 => 0,
        Precision::F64 => 1,
    });
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        match T::PRECISION {
            Precision::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
    out
}

/// Decodes one tensor from the front of `bytes`, returning it and the
/// number of bytes consumed. `origin` names the source in errors.
pub fn decode_prefix(bytes: &[u8], origin: &Path) -> Result<(AnyTensor, usize)> {
    let bad = |r: String| CliError::format(origin, r);
    if bytes.len() < 7 {
        return Err(bad("truncated FMAP header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("not an FMAP tensor (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported FMAP version {}", bytes[4])));
    }
    let width = match bytes[5] {
        0 => 4,
        1 => 8,
        d => return Err(bad(format!("unknown FMAP dtype {d}"))),
    };
    let rank = bytes[6] as usize;
    let mut pos = 7;
    if bytes.len() < pos + 4 * rank {
        return Err(bad("truncated FMAP dimensions".into()));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            u32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap()) as usize
        })
        .collect();
    pos += 4 * rank;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("FMAP dimensions overflow".into()))?;
    let payload = numel
        .checked_mul(width)
        .filter(|&n| bytes.len() - pos >= n)
        .ok_or_else(|| bad(format!("truncated FMAP payload for shape {shape:?}")))?;
    let body = &bytes[pos..pos + payload];
    let t = if width == 4 {
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        AnyTensor::F32(Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?)
    } else {
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        AnyTensor::F64(Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?)
    };
    Ok((t, pos + payload))
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<AnyTensor> {
    let (t, used) = decode_prefix(bytes, origin)?;
    if used != bytes.len() {
        return Err(CliError::format(
            origin,
            format!("{} trailing bytes after FMAP tensor", bytes.len() - used),
        ));
    }
    Ok(t)
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fsutil::write_atomic(path, &encode(t))
}

pub fn read(path: &Path) -> Result<AnyTensor> {
    decode(&fsutil::read(path)?, path)
}
