//! The `MTKT` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | field                                 |
//! |--------------|---------------------------------------|
//! | 4            | magic `MTKT`                          |
//! | 4            | version, `u32`, currently 1           |
//! | 1            | dtype, `u8` (0 = f32, 1 = f64)        |
//! | 1            | ndim, `u8`                            |
//! | 8 * ndim     | dims, `u64` each                      |
//! | elem * numel | row-major little-endian IEEE-754 data |

use std::io::{Read, Write};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTKT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Dense row-major tensor. Values are held as `f64`; an `F32` tensor only
/// ever stores values that are exactly representable in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rounding to single precision when `dtype` is `F32`.
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel = numel(&shape)?;
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::dim(format!("{} dimensions exceed the format limit of 255", shape.len())));
        }
        let data = match dtype {
            DType::F32 => data.into_iter().map(|v| v as f32 as f64).collect(),
            DType::F64 => data,
        };
        Ok(Tensor { dtype, shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(DType::F64, shape, data)
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Result<Self> {
        let n = numel(&shape)?;
        Self::new(dtype, shape, vec![0.0; n])
    }

    pub fn scalar(dtype: DType, value: f64) -> Self {
        Self::new(dtype, Vec::new(), vec![value]).expect("scalar shape is valid")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(self.dtype, shape, self.data)
    }

    /// Byte length of the encoded form.
    pub fn encoded_len(&self) -> usize {
        4 + 4 + 1 + 1 + 8 * self.shape.len() + self.dtype.size() * self.data.len()
    }
}

fn numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::dim(format!("shape {shape:?} overflows the element count")))
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::Io {
            offset: self.written,
            source,
        })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

/// Encodes `t` into `sink`, returning the number of bytes written.
pub fn write_tensor<W: Write>(t: &Tensor, sink: W) -> Result<usize> {
    let mut w = CountingWriter { inner: sink, written: 0 };
    let mut header = Vec::with_capacity(10 + 8 * t.shape.len());
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.push(t.dtype.code());
    header.push(t.shape.len() as u8);
    for &d in &t.shape {
        header.extend_from_slice(&(d as u64).to_le_bytes());
    }
    w.put(&header)?;

    // Chunked so large tensors do not need a second full-size buffer.
    let mut buf = Vec::with_capacity(8 * 4096);
    for chunk in t.data.chunks(4096) {
        buf.clear();
        match t.dtype {
            DType::F32 => chunk.iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => chunk.iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
        }
        w.put(&buf)?;
    }
    Ok(w.written as usize)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Accept NaN and infinities in the payload.
    pub allow_non_finite: bool,
}

/// Decodes an `MTKT` tensor, rejecting non-finite values.
pub fn read_tensor<R: Read>(source: R) -> Result<Tensor> {
    read_tensor_with(source, ReadOptions::default())
}

pub fn read_tensor_with<R: Read>(mut source: R, opts: ReadOptions) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_field(&mut source, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            field: "magic",
            message: format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let mut word = [0u8; 4];
    read_field(&mut source, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format {
            field: "version",
            message: format!("unsupported version {version}"),
        });
    }
    let mut byte = [0u8; 1];
    read_field(&mut source, &mut byte, "dtype")?;
    let dtype = DType::from_code(byte[0]).ok_or_else(|| Error::Format {
        field: "dtype",
        message: format!("unsupported dtype code {}", byte[0]),
    })?;
    read_field(&mut source, &mut byte, "ndim")?;
    let ndim = byte[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut dim = [0u8; 8];
    for _ in 0..ndim {
        read_field(&mut source, &mut dim, "dims")?;
        let d = u64::from_le_bytes(dim);
        let d = usize::try_from(d).map_err(|_| Error::Format {
            field: "dims",
            message: format!("dimension {d} does not fit in memory"),
        })?;
        shape.push(d);
    }
    let count = numel(&shape).map_err(|_| Error::Format {
        field: "dims",
        message: format!("shape {shape:?} overflows the element count"),
    })?;

    let elem = dtype.size();
    let mut data = Vec::with_capacity(count.min(1 << 24));
    let mut buf = vec![0u8; elem * 4096];
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(4096);
        let bytes = &mut buf[..n * elem];
        source.read_exact(bytes).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format {
                field: "data",
                message: format!("truncated data: header declares {count} elements"),
            },
            _ => Error::Format {
                field: "data",
                message: e.to_string(),
            },
        })?;
        match dtype {
            DType::F32 => data.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
            ),
            DType::F64 => data.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()))),
        }
        remaining -= n;
    }
    if !opts.allow_non_finite {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                field: "data",
                message: format!("non-finite value at element {i}"),
            });
        }
    }
    Ok(Tensor { dtype, shape, data })
}

fn read_field<R: Read>(source: &mut R, buf: &mut [u8], field: &'static str) -> Result<()> {
    source.read_exact(buf).map_err(|e| Error::Format {
        field,
        message: match e.kind() {
            std::io::ErrorKind::UnexpectedEof => "truncated header".to_string(),
            _ => e.to_string(),
        },
    })
}
