//! `CC3T` tensor blobs: magic, `u32` rank, `u32` extents, then the raw `f32`
//! payload, all little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"CC3T";

pub fn encoded_len(tensor: &Tensor) -> usize {
    4 + 4 + 4 * tensor.rank() + 4 * tensor.numel()
}

pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &extent in tensor.shape() {
        let extent = u32::try_from(extent)
            .map_err(|_| Error::Format(format!("extent {extent} exceeds u32")))?;
        w.write_all(&extent.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(4 * tensor.numel());
    for v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if &word != MAGIC {
        return Err(Error::Format(format!("bad magic {word:?}")));
    }
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; 4 * numel];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data)
}

pub fn to_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(tensor));
    write_tensor(&mut out, tensor).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    read_tensor(&mut cursor)
}
