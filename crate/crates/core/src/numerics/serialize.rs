//! Binary tensor format.
//!
//! Layout, all little-endian: magic `EFT1`, one dtype byte (0 = f32,
//! 1 = f64), one rank byte, `rank` u64 extents, then the values in
//! row-major order.

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EFT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype as u8, t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", &head[..4])));
    }
    let width = match head[4] {
        0 => 4,
        1 => 8,
        t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
    };
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * width];
    r.read_exact(&mut raw)?;
    let data = if width == 4 {
        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
    } else {
        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    };
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn tensor_to_bytes(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut v = Vec::new();
    write_tensor(&mut v, t, dtype).expect("writing to a Vec cannot fail");
    v
}
