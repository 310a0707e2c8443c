//! Named tensor blob serialization.
//!
//! Wire layout, all little-endian:
//! name length (u32), name bytes (utf-8), dtype tag (u8: 0 = f32, 1 = f64),
//! rank (u32), one extent per dimension (u32), then the values row-major.

use std::io::{Read, Write};

use super::{Dtype, Result, Scalar, Tensor, TensorError};

/// A tensor read back from a blob, tagged by its stored dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    /// Unwraps into the requested scalar type. The stored dtype must match;
    /// a checkpoint written as f32 is not silently widened.
    pub fn into_tensor<T: Scalar>(self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(TensorError::Blob(format!(
                "dtype mismatch: stored {:?}, requested {:?}",
                self.dtype(),
                T::DTYPE
            )));
        }
        // the tags agree, so exactly one of these reinterprets losslessly
        Ok(match self {
            TensorData::F32(t) => t.cast::<T>(),
            TensorData::F64(t) => t.cast::<T>(),
        })
    }

    /// Widening view for inspection and diffs, regardless of stored dtype.
    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }
}

pub fn write_blob<T: Scalar>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(T::DTYPE.tag());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(buf);
    }
}

pub fn write_blob_to<T: Scalar>(w: &mut dyn Write, name: &str, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_blob(&mut buf, name, t);
    w.write_all(&buf)
        .map_err(|e| TensorError::Blob(format!("write failed: {e}")))
}

/// Reads one blob starting at `*pos`, advancing it past the blob.
pub fn read_blob(bytes: &[u8], pos: &mut usize) -> Result<(String, TensorData)> {
    let name_len = take_u32(bytes, pos)? as usize;
    let name_bytes = take(bytes, pos, name_len)?;
    let name = String::from_utf8(name_bytes.to_vec())
        .map_err(|_| TensorError::Blob("blob name is not utf-8".into()))?;
    let tag = take(bytes, pos, 1)?[0];
    let rank = take_u32(bytes, pos)? as usize;
    if rank > 8 {
        return Err(TensorError::Blob(format!("blob '{name}': rank {rank} exceeds 8")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(take_u32(bytes, pos)? as usize);
    }
    let numel: usize = shape.iter().product();
    let data = match tag {
        0 => {
            let raw = take(bytes, pos, numel * 4)?;
            let vals: Vec<f32> = raw.chunks_exact(4).map(f32::read_le).collect();
            TensorData::F32(
                Tensor::new(shape, vals).map_err(|e| TensorError::Blob(e.to_string()))?,
            )
        }
        1 => {
            let raw = take(bytes, pos, numel * 8)?;
            let vals: Vec<f64> = raw.chunks_exact(8).map(f64::read_le).collect();
            TensorData::F64(
                Tensor::new(shape, vals).map_err(|e| TensorError::Blob(e.to_string()))?,
            )
        }
        t => return Err(TensorError::Blob(format!("blob '{name}': unknown dtype tag {t}"))),
    };
    Ok((name, data))
}

pub fn read_blob_from(r: &mut dyn Read) -> Result<(String, TensorData)> {
    // header pieces are read incrementally; values in one gulp
    let name_len = read_u32(r)? as usize;
    let mut name_bytes = vec![0u8; name_len];
    read_exact(r, &mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| TensorError::Blob("blob name is not utf-8".into()))?;
    let mut tag = [0u8; 1];
    read_exact(r, &mut tag)?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(TensorError::Blob(format!("blob '{name}': rank {rank} exceeds 8")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let width = match tag[0] {
        0 => 4,
        1 => 8,
        t => return Err(TensorError::Blob(format!("blob '{name}': unknown dtype tag {t}"))),
    };
    let mut raw = vec![0u8; numel * width];
    read_exact(r, &mut raw)?;
    let data = if tag[0] == 0 {
        let vals: Vec<f32> = raw.chunks_exact(4).map(f32::read_le).collect();
        TensorData::F32(Tensor::new(shape, vals).map_err(|e| TensorError::Blob(e.to_string()))?)
    } else {
        let vals: Vec<f64> = raw.chunks_exact(8).map(f64::read_le).collect();
        TensorData::F64(Tensor::new(shape, vals).map_err(|e| TensorError::Blob(e.to_string()))?)
    };
    Ok((name, data))
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *pos + n > bytes.len() {
        return Err(TensorError::Blob(format!(
            "truncated blob: need {n} bytes at offset {}, have {}",
            *pos,
            bytes.len() - *pos
        )));
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let raw = take(bytes, pos, 4)?;
    Ok(u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]))
}

fn read_exact(r: &mut dyn Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| TensorError::Blob(format!("read failed: {e}")))
}

fn read_u32(r: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
