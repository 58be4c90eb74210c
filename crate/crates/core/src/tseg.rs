//! The `TSEG1` binary tensor container.
//!
//! Layout: magic `54 53 45 47 31`, `u8` dtype (`0` = f32, `1` = u8), `u8`
//! rank, `rank` little-endian `u32` dims, then the row-major little-endian
//! payload. Decoders never allocate more than the input length justifies.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::{check_dims, LabelMap, Tensor};

pub const MAGIC: [u8; 5] = *b"TSEG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U8 = 1,
}

impl DType {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            other => Err(Error::Decode(format!("unknown dtype byte {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

/// Decoded payload of one container.
#[derive(Debug, Clone, PartialEq)]
pub enum TsegValue {
    F32(Tensor),
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

impl TsegValue {
    pub fn dtype(&self) -> DType {
        match self {
            TsegValue::F32(_) => DType::F32,
            TsegValue::U8 { .. } => DType::U8,
        }
    }

    pub fn into_f32(self) -> Result<Tensor> {
        match self {
            TsegValue::F32(t) => Ok(t),
            TsegValue::U8 { .. } => Err(Error::Decode("expected f32 tensor, found u8".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            TsegValue::U8 { dims, data } => {
                ensure!(
                    dims.len() == 2,
                    Decode,
                    "label map must be rank 2, got dims {dims:?}"
                );
                LabelMap::new(dims[0], dims[1], data)
            }
            TsegValue::F32(_) => Err(Error::Decode("expected u8 label map, found f32".into())),
        }
    }
}

fn write_header(out: &mut Vec<u8>, dtype: DType, dims: &[usize]) {
    out.extend_from_slice(&MAGIC);
    out.push(dtype as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn encode_f32_into(out: &mut Vec<u8>, t: &Tensor) {
    write_header(out, DType::F32, t.dims());
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_f32(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    encode_f32_into(&mut out, t);
    out
}

pub fn encode_u8(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    check_dims(dims, data.len())?;
    let mut out = Vec::new();
    write_header(&mut out, DType::U8, dims);
    out.extend_from_slice(data);
    Ok(out)
}

pub fn encode_labels(labels: &LabelMap) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, DType::U8, &[labels.height(), labels.width()]);
    out.extend_from_slice(labels.data());
    out
}

/// Byte cursor shared by the tensor and model decoders.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Decode(format!(
                "truncated input: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn magic(&mut self) -> Result<()> {
        let m = self.take(MAGIC.len())?;
        ensure!(m == MAGIC, Decode, "bad magic {m:02x?}");
        Ok(())
    }

    pub(crate) fn tensor(&mut self) -> Result<TsegValue> {
        self.magic()?;
        let dtype = DType::from_byte(self.u8()?)?;
        let rank = self.u8()? as usize;
        ensure!((1..=4).contains(&rank), Decode, "rank {rank} not in 1..=4");
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Decode(format!("dims {dims:?} overflow")))?;
        let nbytes = count
            .checked_mul(dtype.width())
            .ok_or_else(|| Error::Decode(format!("payload size for {dims:?} overflows")))?;
        let payload = self.take(nbytes)?;
        match dtype {
            DType::F32 => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Ok(TsegValue::F32(
                    Tensor::new(dims, data).map_err(|e| Error::Decode(e.to_string()))?,
                ))
            }
            DType::U8 => Ok(TsegValue::U8 {
                dims,
                data: payload.to_vec(),
            }),
        }
    }
}

/// Decodes exactly one container; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<TsegValue> {
    let mut r = Reader::new(bytes);
    let v = r.tensor()?;
    ensure!(
        r.remaining() == 0,
        Decode,
        "{} trailing bytes after tensor",
        r.remaining()
    );
    Ok(v)
}

/// Decodes one container from the front of `bytes`, returning the bytes used.
pub fn decode_prefix(bytes: &[u8]) -> Result<(TsegValue, usize)> {
    let mut r = Reader::new(bytes);
    let v = r.tensor()?;
    Ok((v, r.position()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_f32(t)).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)?.into_f32()
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)?.into_labels()
}
