//! STSR: the little-endian tensor container shared by every pipeline stage.
//!
//! Layout (bit-exact):
//!
//! ```text
//! "STSR" | version u8 = 1 | dtype u8 | ndim u8 | pad u8 = 0 | ndim x u64 LE | payload
//! ```
//!
//! dtype codes: 0 = f32, 1 = i32, 2 = u16, 3 = u8. The payload is row-major
//! little-endian with no compression, so the header is always `8 + 8 * ndim`
//! bytes.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const MAGIC: [u8; 4] = *b"STSR";
pub const VERSION: u8 = 1;
pub const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    I32 = 1,
    U16 = 2,
    U8 = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::I32),
            2 => Some(DType::U16),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U16 => 2,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U16(Vec<u16>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
            TensorData::U16(_) => DType::U16,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// f32 payloads compare by bit pattern so NaN payloads round-trip as equal.
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I32(a), TensorData::I32(b)) => a == b,
            (TensorData::U16(a), TensorData::U16(b)) => a == b,
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorContainer {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        ensure!(
            expected == data.len(),
            Validation,
            "shape {:?} holds {} values but {} were supplied",
            shape,
            expected,
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn i32(shape: Vec<usize>, values: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(values))
    }

    pub fn u16(shape: Vec<usize>, values: Vec<u16>) -> Result<Self> {
        Self::new(shape, TensorData::U16(values))
    }

    pub fn u8(shape: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Values widened to f32 regardless of stored dtype.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::I32(v) => v.iter().map(|&x| x as f32).collect(),
            TensorData::U16(v) => v.iter().map(|&x| x as f32).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Integer view for label-like tensors. Floats are rejected.
    pub fn to_i32_vec(&self) -> Result<Vec<i32>> {
        match &self.data {
            TensorData::I32(v) => Ok(v.clone()),
            TensorData::U16(v) => Ok(v.iter().map(|&x| x as i32).collect()),
            TensorData::U8(v) => Ok(v.iter().map(|&x| x as i32).collect()),
            TensorData::F32(_) => Err(Error::Validation("expected an integer tensor, found f32".into())),
        }
    }

    pub fn header_len(ndim: usize) -> usize {
        8 + 8 * ndim
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.data.len();
        let mut out = Vec::with_capacity(Self::header_len(self.ndim()) + n * self.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dtype() as u8);
        out.push(self.ndim() as u8);
        out.push(0);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 8, Format, "file shorter than the 8-byte preamble");
        ensure!(bytes[..4] == MAGIC, Format, "bad magic {:?}", &bytes[..4]);
        ensure!(bytes[4] == VERSION, Format, "unsupported version {}", bytes[4]);
        let dtype =
            DType::from_code(bytes[5]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))?;
        let ndim = bytes[6] as usize;
        ensure!(
            (1..=MAX_NDIM).contains(&ndim),
            Format,
            "ndim {} outside 1..={}",
            ndim,
            MAX_NDIM
        );
        ensure!(bytes[7] == 0, Format, "nonzero pad byte");
        let header = Self::header_len(ndim);
        ensure!(bytes.len() >= header, Corrupt, "truncated shape block");

        let mut shape = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let off = 8 + 8 * i;
            let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            ensure!(d >= 1, Format, "extent {} of axis {} must be at least 1", d, i);
            shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;

        let payload = &bytes[header..];
        let want = count.checked_mul(dtype.size());
        ensure!(
            want == Some(payload.len()),
            Corrupt,
            "shape {:?} ({}) needs {} payload bytes, found {}",
            shape,
            count,
            count.saturating_mul(dtype.size()),
            payload.len()
        );

        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U16 => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { shape, data })
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    ensure!(
        (1..=MAX_NDIM).contains(&shape.len()),
        Validation,
        "ndim {} outside 1..={}",
        shape.len(),
        MAX_NDIM
    );
    ensure!(
        shape.iter().all(|&d| d >= 1),
        Validation,
        "every extent must be at least 1, got {:?}",
        shape
    );
    Ok(())
}

pub fn save_tensor(t: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorContainer::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}
