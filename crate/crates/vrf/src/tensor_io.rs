//! `VRF1` tensor files.
//!
//! ```text
//! magic  b"VRF1"
//! dtype  u8   1 = f32, 2 = u32 (both little-endian)
//! rank   u8   1 or 2
//! dims   rank x u64 LE
//! data   row-major, LE, no padding
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use vrf_core::Matrix;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VRF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    U32 = 2,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub dims: Vec<u64>,
}

impl Header {
    pub fn encoded_len(&self) -> usize {
        6 + 8 * self.dims.len()
    }

    /// Number of elements, or `None` on overflow.
    pub fn numel(&self) -> Option<u64> {
        self.dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }

    fn payload_len(&self) -> Option<u64> {
        self.numel()?.checked_mul(self.dtype.size() as u64)
    }

    pub fn rows(&self) -> u64 {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> Option<u64> {
        self.dims.get(1).copied()
    }
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let t = Tensor { dims, data };
        t.check()?;
        Ok(t)
    }

    pub fn vector_f32(v: Vec<f32>) -> Self {
        Tensor {
            dims: vec![v.len() as u64],
            data: TensorData::F32(v),
        }
    }

    pub fn vector_u32(v: Vec<u32>) -> Self {
        Tensor {
            dims: vec![v.len() as u64],
            data: TensorData::U32(v),
        }
    }

    pub fn from_matrix(m: &Matrix<f32>) -> Self {
        Tensor {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: TensorData::F32(m.as_slice().to_vec()),
        }
    }

    pub fn header(&self) -> Header {
        Header {
            dtype: self.data.dtype(),
            dims: self.dims.clone(),
        }
    }

    fn check(&self) -> Result<()> {
        let rank = self.dims.len();
        if !(1..=2).contains(&rank) {
            return Err(Error::UnsupportedRank(rank as u8));
        }
        let numel = self.header().numel().ok_or(Error::DimsOverflow)?;
        if numel != self.data.len() as u64 {
            return Err(Error::Format(format!(
                "dims {:?} hold {numel} values but {} were given",
                self.dims,
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn into_matrix(self) -> Result<Matrix<f32>> {
        let (rows, cols) = match self.dims[..] {
            [r, c] => (r as usize, c as usize),
            _ => return Err(Error::Format(format!("expected a matrix, got dims {:?}", self.dims))),
        };
        match self.data {
            TensorData::F32(v) => Ok(Matrix::from_vec(rows, cols, v)?),
            TensorData::U32(_) => Err(Error::Format("expected f32 data, got u32".into())),
        }
    }

    pub fn into_labels(self) -> Result<Vec<u32>> {
        if self.dims.len() != 1 {
            return Err(Error::Format(format!("expected a vector, got dims {:?}", self.dims)));
        }
        match self.data {
            TensorData::U32(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Format("expected u32 labels, got f32".into())),
        }
    }

    pub fn into_f32_vec(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U32(_) => Err(Error::Format("expected f32 data, got u32".into())),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.check()?;
        let header = self.header();
        let mut out = Vec::with_capacity(header.encoded_len() + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.push(header.dtype.code());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let header = read_header_from(&mut cursor)?;
        let expected = header.payload_len().ok_or(Error::DimsOverflow)?;
        let found = cursor.len() as u64;
        if found < expected {
            return Err(Error::Truncated { expected, found });
        }
        if found > expected {
            return Err(Error::TrailingBytes(found - expected));
        }
        let words = cursor.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let data = match header.dtype {
            DType::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            DType::U32 => TensorData::U32(words.map(u32::from_le_bytes).collect()),
        };
        Ok(Tensor {
            dims: header.dims,
            data,
        })
    }
}

fn read_header_from(r: &mut impl Read) -> Result<Header> {
    let mut fixed = [0u8; 6];
    read_exact_or_truncated(r, &mut fixed, 0)?;
    if fixed[..4] != MAGIC {
        return Err(Error::BadMagic([fixed[0], fixed[1], fixed[2], fixed[3]]));
    }
    let dtype = DType::from_code(fixed[4]).ok_or(Error::UnsupportedDtype(fixed[4]))?;
    let rank = fixed[5];
    if !(1..=2).contains(&rank) {
        return Err(Error::UnsupportedRank(rank));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact_or_truncated(r, &mut b, 6)?;
        dims.push(u64::from_le_bytes(b));
    }
    let header = Header { dtype, dims };
    let payload = header.payload_len().ok_or(Error::DimsOverflow)?;
    if usize::try_from(payload).is_err() {
        return Err(Error::DimsOverflow);
    }
    Ok(header)
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], offset: u64) -> Result<()> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(Error::Truncated {
            expected: offset + buf.len() as u64,
            found: offset,
        }),
        Err(e) => Err(e.into()),
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: PathBuf::from(path),
        source,
    }
}

/// Reads only the header; used to validate manifests without loading data.
pub fn read_header(path: &Path) -> Result<Header> {
    let mut f = fs::File::open(path).map_err(io_at(path))?;
    let header = read_header_from(&mut f).map_err(|e| e.at(path))?;
    let len = f.metadata().map_err(io_at(path))?.len();
    let expected = header.encoded_len() as u64 + header.payload_len().ok_or(Error::DimsOverflow)?;
    if len < expected {
        return Err(Error::Truncated {
            expected: expected - header.encoded_len() as u64,
            found: len.saturating_sub(header.encoded_len() as u64),
        }
        .at(path));
    }
    if len > expected {
        return Err(Error::TrailingBytes(len - expected).at(path));
    }
    Ok(header)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    Tensor::decode(&bytes).map_err(|e| e.at(path))
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes = tensor.encode()?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_at(&tmp))?;
        f.write_all(bytes).map_err(io_at(&tmp))?;
        f.sync_all().map_err(io_at(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_at(path))
}

pub fn write_matrix(path: &Path, m: &Matrix<f32>) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<Matrix<f32>> {
    read_tensor(path)?.into_matrix().map_err(|e| e.at(path))
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    write_tensor(path, &Tensor::vector_u32(labels.to_vec()))
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    read_tensor(path)?.into_labels().map_err(|e| e.at(path))
}
