//! TMDF tensor file format.
//!
//! Little-endian layout: magic `"TMDF"`, format version u32 = 1, dtype code
//! u8 = 1 (IEEE-754 binary32), ndim u8 in 1..=4, reserved u16 = 0, dims as
//! u32 × ndim, then the row-major binary32 payload. Compute stays 64-bit;
//! storage quantizes to 32-bit and loading promotes back.

use std::fs;
use std::path::Path;

use crate::tensor::Tensor;

use super::{DataError, Result};

const MAGIC: [u8; 4] = *b"TMDF";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let ndim = t.rank();
    if !(1..=4).contains(&ndim) {
        return Err(DataError::BadNdim { got: ndim as u8 });
    }
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(DataError::DimOverflow {
                dims: t.shape().iter().map(|&d| d.min(u32::MAX as usize) as u32).collect(),
            });
        }
    }
    let mut buf = Vec::with_capacity(12 + 4 * ndim + 4 * t.numel());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.push(ndim as u8);
    buf.extend_from_slice(&0u16.to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_tensor(&buf, &path.display().to_string())
}

/// Parse an in-memory TMDF image; `origin` names the source in errors.
pub fn decode_tensor(buf: &[u8], origin: &str) -> Result<Tensor> {
    let header_err = |expected: usize| DataError::Truncated {
        expected,
        got: buf.len(),
    };
    if buf.len() < 12 {
        return Err(header_err(12));
    }
    if buf[0..4] != MAGIC {
        return Err(DataError::BadMagic {
            got: [buf[0], buf[1], buf[2], buf[3]],
        });
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(DataError::UnsupportedVersion { got: version });
    }
    if buf[8] != DTYPE_F32 {
        return Err(DataError::UnsupportedDtype { got: buf[8] });
    }
    let ndim = buf[9] as usize;
    if !(1..=4).contains(&ndim) {
        return Err(DataError::BadNdim { got: buf[9] });
    }
    let reserved = u16::from_le_bytes(buf[10..12].try_into().unwrap());
    if reserved != 0 {
        return Err(DataError::NonZeroReserved { got: reserved });
    }
    if buf.len() < 12 + 4 * ndim {
        return Err(header_err(12 + 4 * ndim));
    }
    let dims: Vec<u32> = (0..ndim)
        .map(|i| u32::from_le_bytes(buf[12 + 4 * i..16 + 4 * i].try_into().unwrap()))
        .collect();
    if dims.iter().any(|&d| d == 0) {
        return Err(DataError::Tensor(crate::tensor::TensorError::ZeroDim {
            shape: dims.iter().map(|&d| d as usize).collect(),
        }));
    }
    let mut numel = 1usize;
    for &d in &dims {
        numel = numel
            .checked_mul(d as usize)
            .ok_or_else(|| DataError::DimOverflow { dims: dims.clone() })?;
    }
    let body = &buf[12 + 4 * ndim..];
    let expected = numel
        .checked_mul(4)
        .ok_or_else(|| DataError::DimOverflow { dims: dims.clone() })?;
    if body.len() < expected {
        return Err(DataError::Truncated {
            expected: 12 + 4 * ndim + expected,
            got: buf.len(),
        });
    }
    if body.len() > expected {
        return Err(DataError::TrailingBytes {
            path: origin.to_string(),
        });
    }
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(&shape, data)?)
}
