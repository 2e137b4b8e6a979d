//! Tensor files: a flat little-endian binary layout and a JSON form.
//!
//! Binary layout: `order: u64`, `dims: [u64; order]`, then the row-major
//! payload as `f64`.

use std::io::{Read, Write};

use thiserror::Error;

use crate::tensor::DenseTensor;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed tensor file: {0}")]
    Format(String),
}

const MAX_ORDER: u64 = 64;

pub fn write_binary(t: &DenseTensor, mut w: impl Write) -> Result<(), IoError> {
    w.write_all(&(t.dims().len() as u64).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64, IoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_binary(mut r: impl Read) -> Result<DenseTensor, IoError> {
    let order = read_u64(&mut r)?;
    if order > MAX_ORDER {
        return Err(IoError::Format(format!("order {order}")));
    }
    let dims = (0..order)
        .map(|_| read_u64(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let vol = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| IoError::Format(format!("dims {dims:?} overflow")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != vol * 8 {
        return Err(IoError::Format(format!("{} payload bytes for {vol} elements", bytes.len())));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseTensor::from_vec(&dims, data).map_err(|e| IoError::Format(e.to_string()))
}

/// `{"dims": [..], "data": [..]}`
pub fn to_json(t: &DenseTensor) -> String {
    serde_json::to_string(t).expect("tensors serialize")
}

pub fn from_json(s: &str) -> Result<DenseTensor, IoError> {
    let t: DenseTensor = serde_json::from_str(s)?;
    DenseTensor::from_vec(t.dims(), t.data().to_vec()).map_err(|e| IoError::Format(e.to_string()))
}
