//! Raw tensor dump: `"SSYN"`, version (u32 LE), rank (u32 LE), dims
//! (rank × u64 LE), then row-major f64 LE payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"SSYN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    dims: Vec<u64>,
    data: Vec<f64>,
}

impl RawTensor {
    pub fn new(dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        let expected = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        if expected != data.len() as u64 {
            return Err(Error::Format(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Stacks equally shaped matrices into a rank-3 tensor.
    pub fn from_matrices<T: Scalar>(ms: &[Matrix<T>]) -> Result<Self> {
        let shape = ms.first().map_or((0, 0), Matrix::shape);
        if ms.iter().any(|m| m.shape() != shape) {
            return Err(Error::shape("stacked matrices differ in shape"));
        }
        Self::new(
            vec![ms.len() as u64, shape.0 as u64, shape.1 as u64],
            ms.iter().flat_map(|m| m.data().iter().map(|v| v.as_f64())).collect(),
        )
    }

    /// Splits a rank-3 tensor back into matrices.
    pub fn to_matrices<T: Scalar>(&self) -> Result<Vec<Matrix<T>>> {
        if self.dims.len() != 3 {
            return Err(Error::Format(format!("expected rank 3, got {}", self.dims.len())));
        }
        let (rows, cols) = (self.dims[1] as usize, self.dims[2] as usize);
        if rows * cols == 0 {
            return Ok(vec![Matrix::zeros(rows, cols); self.dims[0] as usize]);
        }
        self.data
            .chunks_exact(rows * cols)
            .map(|c| Matrix::new(rows, cols, c.iter().map(|&v| T::lit(v)).collect()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * (self.dims.len() + self.data.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        Self::read_from(&mut cursor)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let rank = read_u32(r)? as usize;
        let dims = (0..rank).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() as u64 != count.saturating_mul(8) {
            return Err(Error::Format(format!(
                "payload holds {} bytes, dims need {}",
                payload.len(),
                count.saturating_mul(8)
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated header".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
