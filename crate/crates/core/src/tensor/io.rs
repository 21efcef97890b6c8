//! Little-endian binary tensor records:
//! `"SAPT" | u32 version | u32 rank | u64 extents[rank] | u8 dtype | data`.

use std::io::{self, Read, Write};

use super::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"SAPT";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&[dtype as u8])?;
    let mut buf = Vec::with_capacity(t.len() * 8);
    match dtype {
        DType::F64 => t
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    w.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads one tensor record. `f32` payloads are widened to `f64`.
pub fn read_tensor<R: Read>(r: &mut R) -> io::Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(invalid(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(invalid(format!("unsupported tensor version {version}")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(invalid(format!("unsupported tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u64(r).map(|e| e as usize))
        .collect::<io::Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .filter(|&n| n > 0 && n < (1 << 32))
        .ok_or_else(|| invalid(format!("bad tensor extents {shape:?}")))?;
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    let data = match dtype[0] {
        0 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        1 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        d => return Err(invalid(format!("unknown dtype tag {d}"))),
    };
    Tensor::new(&shape, data).map_err(|e| invalid(e.to_string()))
}
