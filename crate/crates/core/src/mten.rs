//! MTEN binary tensor format.
//!
//! Layout: `"MTEN"` | version `u8 = 1` | dtype `u8` (0 = f32, 1 = f64, 2 = u8)
//! | ndim `u8` | pad `u8 = 0` | ndim × `u64` LE extents | row-major LE payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{validate_shape, DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MTEN";
pub const VERSION: u8 = 1;

/// A decoded MTEN payload of any supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8 { .. } => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8 { shape, .. } => shape,
        }
    }

    /// Converts a floating payload to `S`. Casting between f32 and f64 is
    /// allowed; u8 payloads are rejected.
    pub fn into_real<S: Real>(self) -> Result<Tensor<S>> {
        match self {
            AnyTensor::F32(t) => Ok(t.cast()),
            AnyTensor::F64(t) => Ok(t.cast()),
            AnyTensor::U8 { .. } => Err(Error::DTypeMismatch {
                expected: S::DTYPE.name(),
                found: "u8",
            }),
        }
    }
}

fn write_header<W: Write>(sink: &mut W, dtype: DType, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::shape(shape, "too many dimensions for MTEN"));
    }
    let mut head = Vec::with_capacity(8 + 8 * shape.len());
    head.extend_from_slice(MAGIC);
    head.push(VERSION);
    head.push(dtype.code());
    head.push(shape.len() as u8);
    head.push(0);
    for &d in shape {
        head.extend_from_slice(&(d as u64).to_le_bytes());
    }
    sink.write_all(&head)?;
    Ok(())
}

/// Writes a floating tensor. Non-finite values are rejected.
pub fn write<S: Real, W: Write>(t: &Tensor<S>, sink: &mut W) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::domain("mten_write", "tensor contains non-finite values"));
    }
    write_header(sink, S::DTYPE, t.shape())?;
    let mut payload = Vec::with_capacity(t.len() * S::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut payload);
    }
    sink.write_all(&payload)?;
    Ok(())
}

pub fn write_u8<W: Write>(shape: &[usize], data: &[u8], sink: &mut W) -> Result<()> {
    let len = validate_shape(shape)?;
    if len != data.len() {
        return Err(Error::LengthMismatch {
            shape: shape.to_vec(),
            expected: len,
            got: data.len(),
        });
    }
    write_header(sink, DType::U8, shape)?;
    sink.write_all(data)?;
    Ok(())
}

fn read_exact<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

/// Reads one tensor of whatever dtype the header declares.
pub fn read_any<R: Read>(source: &mut R) -> Result<AnyTensor> {
    let mut head = [0u8; 8];
    read_exact(source, &mut head, "MTEN header")?;
    if &head[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: "MTEN".into(),
            found: String::from_utf8_lossy(&head[..4]).into_owned(),
        });
    }
    if head[4] != VERSION {
        return Err(Error::UnsupportedVersion(head[4]));
    }
    let dtype = DType::from_code(head[5])?;
    let ndim = head[6] as usize;
    if head[7] != 0 {
        return Err(Error::Corrupt(format!("nonzero pad byte {}", head[7])));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact(source, &mut b, "MTEN extents")?;
        let d = u64::from_le_bytes(b);
        shape.push(usize::try_from(d).map_err(|_| Error::Corrupt(format!("extent {d}")))?);
    }
    let len = validate_shape(&shape)?;
    let nbytes = len
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Corrupt("payload size overflows".into()))?;
    let mut payload = vec![0u8; nbytes];
    read_exact(source, &mut payload, "MTEN payload")?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::from_parts(
            shape,
            payload.chunks_exact(4).map(f32::read_le).collect(),
        )),
        DType::F64 => AnyTensor::F64(Tensor::from_parts(
            shape,
            payload.chunks_exact(8).map(f64::read_le).collect(),
        )),
        DType::U8 => AnyTensor::U8 {
            shape,
            data: payload,
        },
    })
}

/// Reads a tensor whose stored dtype must equal `S`.
pub fn read<S: Real, R: Read>(source: &mut R) -> Result<Tensor<S>> {
    let any = read_any(source)?;
    if any.dtype() != S::DTYPE {
        return Err(Error::DTypeMismatch {
            expected: S::DTYPE.name(),
            found: any.dtype().name(),
        });
    }
    any.into_real()
}
