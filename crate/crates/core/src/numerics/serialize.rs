//! Tensor wire format: rank (u64 LE), each dim (u64 LE), then row-major f32 LE.

use std::io::{Read, Write};

use super::{NumericsError, Tensor};

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), NumericsError> {
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NumericsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, NumericsError> {
    let rank = read_u64(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(NumericsError::BadShape(vec![rank]));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n < (1 << 32))
        .ok_or_else(|| NumericsError::BadShape(shape.clone()))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

/// Count (u64 LE) followed by each tensor.
pub fn write_tensors<W: Write>(w: &mut W, ts: &[Tensor]) -> Result<(), NumericsError> {
    w.write_all(&(ts.len() as u64).to_le_bytes())?;
    for t in ts {
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor>, NumericsError> {
    let n = read_u64(r)? as usize;
    if n > 1 << 20 {
        return Err(NumericsError::BadShape(vec![n]));
    }
    (0..n).map(|_| read_tensor(r)).collect()
}
