//! Binary tensor format: `rank: u64`, `dims: [u64; rank]`, then the elements
//! as little-endian `f64`. A tensor list is prefixed by its `u64` count.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor) -> Result<()> {
    out.write_all(&(tensor.rank() as u64).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.len() * 8);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let rank = read_u64(input)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u64(input).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= 1 << 28)
        .ok_or_else(|| Error::Format(format!("implausible tensor shape {shape:?}")))?;
    let mut raw = vec![0u8; count * 8];
    input.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensors<W: Write>(out: &mut W, tensors: &[Tensor]) -> Result<()> {
    out.write_all(&(tensors.len() as u64).to_le_bytes())?;
    tensors.iter().try_for_each(|t| write_tensor(out, t))
}

pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<Tensor>> {
    let count = read_u64(input)? as usize;
    (0..count).map(|_| read_tensor(input)).collect()
}
