//! Binary checkpoint format.
//!
//! ```text
//! "CATCKPT1"
//! u64 tensor count
//! per tensor: u64 name length, name bytes (utf-8), u64 rank,
//!             rank × u64 dims, numel × f64 values
//! ```
//! All integers and reals are little-endian.

use std::io::{Read, Write};

use crate::error::{CatError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"CATCKPT1";

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 16;

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CatError::data("not a CATCKPT1 checkpoint"));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)?;
        if len > MAX_NAME {
            return Err(CatError::data("checkpoint tensor name too long"));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CatError::data("tensor name is not utf-8"))?;
        let rank = read_u64(&mut r)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(CatError::data(format!("bad rank {rank} for {name:?}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CatError::data("tensor size overflow"))?;
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
