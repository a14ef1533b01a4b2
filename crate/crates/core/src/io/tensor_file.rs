//! Binary tensor files.
//!
//! Layout, all little-endian: magic `MDRT`, version `u16`, dtype `u8`
//! (1 = f32), ndim `u8`, `ndim` × `u32` dims, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"MDRT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

/// Serializes a tensor, rounding values to f32.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("too many dimensions: {}", t.ndim())));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d =
            u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a tensor and returns it with the number of bytes consumed.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let short = || Error::Format("tensor data is truncated".into());
    if bytes.len() < 8 {
        return Err(short());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a tensor file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor file version {version}"
        )));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(Error::Format(format!(
            "unsupported dtype code {}",
            bytes[6]
        )));
    }
    let ndim = bytes[7] as usize;
    let mut pos = 8;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = bytes.get(pos..pos + 4).ok_or_else(short)?;
        shape.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let payload = bytes.get(pos..pos + 4 * n).ok_or_else(short)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((Tensor::new(&shape, data)?, pos + 4 * n))
}

/// Parses a complete tensor file; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    decode_tensor(&bytes)
}
