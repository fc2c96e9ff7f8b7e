//! Binary tensor dump: `b"EFT1"`, `u32` rank, `rank` x `u32` extents, then
//! the values as `f64`, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EFT1";

pub fn write_tensor<S: Scalar, W: Write>(mut w: W, t: &Tensor<S>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<S: Scalar, R: Read>(mut r: R) -> Result<Tensor<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(&mut r)? as usize;
    let shape = (0..rank)
        .map(|_| read_u32(&mut r).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Data(format!("corrupt tensor dump: {e}")))
}

pub fn save<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    read_tensor(BufReader::new(File::open(path)?))
}
