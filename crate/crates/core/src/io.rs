//! The `FFDT` binary tensor format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FFDT" | dtype: u8 (0 = f32, 1 = f64) | ndim: u8 | dims: ndim × u64 | payload
//! ```
//!
//! The payload is the row-major element data in the declared dtype.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"FFDT";

/// A tensor whose element type is only known after decoding.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, rounding when narrowing.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Scalar>(tensor: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    let ndim =
        u8::try_from(tensor.ndim()).map_err(|_| Error::Invalid(format!("rank {} exceeds 255", tensor.ndim())))?;
    out.reserve(6 + 8 * tensor.ndim() + T::DTYPE.size() * tensor.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE.code());
    out.push(ndim);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn tensor_to_bytes<T: Scalar>(tensor: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_tensor(tensor, &mut out)?;
    Ok(out)
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let mut cur = Cursor::new(bytes, "FFDT tensor");
    if cur.take(4)? != TENSOR_MAGIC {
        return Err(Error::format("FFDT tensor", "bad magic"));
    }
    let code = cur.u8()?;
    let dtype =
        DType::from_code(code).ok_or_else(|| Error::format("FFDT tensor", format!("unknown dtype code {code}")))?;
    let ndim = cur.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for _ in 0..ndim {
        let d = usize::try_from(cur.u64()?).map_err(|_| Error::format("FFDT tensor", "dimension overflows usize"))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::format("FFDT tensor", "element count overflows"))?;
        shape.push(d);
    }
    let payload_len = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::format("FFDT tensor", "payload size overflows"))?;
    let payload = cur.take(payload_len)?;
    let tensor = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(shape, read_payload(payload))?),
        DType::F64 => AnyTensor::F64(Tensor::new(shape, read_payload(payload))?),
    };
    Ok((tensor, cur.pos))
}

fn read_payload<T: Scalar>(payload: &[u8]) -> Vec<T> {
    payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect()
}

/// Decodes a buffer that must contain exactly one tensor.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<AnyTensor> {
    let (t, used) = decode_tensor(bytes)?;
    if used != bytes.len() {
        return Err(Error::format(
            "FFDT tensor",
            format!("{} trailing bytes", bytes.len() - used),
        ));
    }
    Ok(t)
}

pub fn write_tensor_file<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    fs::write(path, tensor_to_bytes(tensor)?)?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    tensor_from_bytes(&fs::read(path)?)
}

/// Bounds-checked little-endian reader shared by the binary decoders.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn remaining(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.what, format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }

    pub(crate) fn skip(&mut self, n: usize) -> Result<()> {
        self.take(n).map(|_| ())
    }
}
