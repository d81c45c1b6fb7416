//! Little-endian tensor records shared by feature files and checkpoints.
//!
//! A record is `dtype tag (u32)` followed by the row-major payload. Feature
//! files fix the rank to four in their header; checkpoint records carry an
//! explicit `rank (u32)` and dims before the tag.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const TAG_F32: u32 = 0;
pub const TAG_F64: u32 = 1;

pub fn dtype_tag(dtype: DType) -> Result<u32> {
    match dtype {
        DType::F32 => Ok(TAG_F32),
        DType::F64 => Ok(TAG_F64),
        other => Err(Error::Config(format!("unsupported tensor dtype {other:?}"))),
    }
}

pub fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(path, "file is truncated"),
        _ => Error::io(path, e),
    })
}

/// Writes the dtype tag and payload of `t`.
pub fn write_payload(w: &mut impl Write, t: &Tensor) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => {
            write_u32(w, TAG_F32).map_err(|e| Error::io("<stream>", e))?;
            let mut buf = Vec::with_capacity(flat.elem_count() * 4);
            for v in flat.to_vec1::<f32>()? {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(|e| Error::io("<stream>", e))?;
        }
        DType::F64 => {
            write_u32(w, TAG_F64).map_err(|e| Error::io("<stream>", e))?;
            let mut buf = Vec::with_capacity(flat.elem_count() * 8);
            for v in flat.to_vec1::<f64>()? {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(|e| Error::io("<stream>", e))?;
        }
        other => return Err(Error::Config(format!("unsupported tensor dtype {other:?}"))),
    }
    Ok(())
}

/// Reads a dtype tag and a payload of `dims` elements.
pub fn read_payload(r: &mut impl Read, dims: &[usize], path: &Path) -> Result<Tensor> {
    let tag = read_u32(r, path)?;
    let n: usize = dims.iter().product();
    let t = match tag {
        TAG_F32 => {
            let mut buf = vec![0u8; n * 4];
            read_exact(r, &mut buf, path)?;
            let vals: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(vals, dims, &Device::Cpu)?
        }
        TAG_F64 => {
            let mut buf = vec![0u8; n * 8];
            read_exact(r, &mut buf, path)?;
            let vals: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(vals, dims, &Device::Cpu)?
        }
        other => return Err(Error::format(path, format!("unknown dtype tag {other}"))),
    };
    Ok(t)
}

/// Writes a self-describing record: rank, dims, tag, payload.
pub fn write_record(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_u32(w, t.rank() as u32).map_err(|e| Error::io("<stream>", e))?;
    for &d in t.dims() {
        write_u32(w, d as u32).map_err(|e| Error::io("<stream>", e))?;
    }
    write_payload(w, t)
}

pub fn read_record(r: &mut impl Read, path: &Path) -> Result<Tensor> {
    let rank = read_u32(r, path)? as usize;
    if rank > 8 {
        return Err(Error::format(path, format!("implausible tensor rank {rank}")));
    }
    let dims = (0..rank).map(|_| read_u32(r, path).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    read_payload(r, &dims, path)
}
