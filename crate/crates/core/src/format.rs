//! Named-tensor container used for backbone weights and model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "AUFW" | u16 version=1 | u32 tensor_count
//! repeated tensor_count times:
//!     u16 name_len | name (utf-8) | u8 rank | u32 dims[rank]
//! f32 payloads, contiguous, in header order
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const WEIGHT_MAGIC: &[u8; 4] = b"AUFW";
pub const WEIGHT_VERSION: u16 = 1;

/// Largest accepted single dimension; anything at or above 2³¹ is rejected.
pub const MAX_DIM: u64 = 1 << 31;

pub fn write_tensors<T: Scalar, W: Write>(
    mut w: W,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    w.write_all(WEIGHT_MAGIC)?;
    w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::format(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        write_shape(&mut w, t.shape())?;
    }
    for (_, t) in tensors {
        write_f32_payload(&mut w, t)?;
    }
    Ok(())
}

pub fn read_tensors<T: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    expect_magic(&mut r, WEIGHT_MAGIC)?;
    let version = read_u16(&mut r)?;
    if version != WEIGHT_VERSION {
        return Err(Error::format(format!(
            "unsupported weight file version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut headers = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("tensor name is not valid utf-8"))?;
        let shape = read_shape(&mut r)?;
        headers.push((name, shape));
    }
    let mut out = Vec::with_capacity(headers.len());
    for (name, shape) in headers {
        let t = read_f32_payload(&mut r, &shape)?;
        out.push((name, t));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format("trailing bytes after tensor payloads"));
    }
    Ok(out)
}

pub fn save_tensors<T: Scalar>(path: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensors<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path)?;
    read_tensors(bytes.as_slice())
}

pub(crate) fn write_shape<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    let rank = u8::try_from(shape.len()).map_err(|_| Error::format("rank exceeds 255"))?;
    w.write_all(&[rank])?;
    for &d in shape {
        if d as u64 >= MAX_DIM {
            return Err(Error::format(format!("dimension {d} exceeds 2^31")));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_shape<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let mut rank = [0u8; 1];
    read_exact(r, &mut rank)?;
    if rank[0] == 0 {
        return Err(Error::format("rank 0 tensors are not supported"));
    }
    let mut shape = Vec::with_capacity(rank[0] as usize);
    let mut numel: u64 = 1;
    for _ in 0..rank[0] {
        let d = read_u32(r)? as u64;
        if d == 0 || d >= MAX_DIM {
            return Err(Error::format(format!("dimension {d} out of range")));
        }
        numel = numel
            .checked_mul(d)
            .filter(|&n| n < MAX_DIM)
            .ok_or_else(|| Error::format("tensor element count overflows"))?;
        shape.push(d as usize);
    }
    Ok(shape)
}

pub(crate) fn write_f32_payload<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32_payload<T: Scalar, R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let mut buf = vec![0u8; numel * 4];
    read_exact(r, &mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    read_exact(r, &mut got)?;
    if &got != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format("truncated file"),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
