//! `EMBF` embedding files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "EMBF"
//! 4       4           format version (u32, currently 1)
//! 8       4           row count (u32)
//! 12      4           dimension (u32)
//! 16      1           identity flag (u8, 0 or 1)
//! 17      4*rows      identities (u32 each), only when the flag is 1
//! ..      4*rows*dim  row-major f32 payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::numeric::Matrix;

pub const MAGIC: [u8; 4] = *b"EMBF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    rows: u32,
    dim: u32,
    ids: Option<Vec<u32>>,
    data: Vec<f32>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

impl EmbeddingFile {
    pub fn new(rows: u32, dim: u32, ids: Option<Vec<u32>>, data: Vec<f32>) -> Result<Self> {
        let expected = rows as u64 * dim as u64;
        if data.len() as u64 != expected {
            return Err(corrupt(format!(
                "payload holds {} values, header says {rows}x{dim}",
                data.len()
            )));
        }
        if let Some(ids) = &ids {
            if ids.len() as u64 != rows as u64 {
                return Err(corrupt(format!("{} identities for {rows} rows", ids.len())));
            }
        }
        Ok(Self {
            rows,
            dim,
            ids,
            data,
        })
    }

    /// Rounds `m` to 32-bit floats.
    pub fn from_matrix(m: &Matrix, ids: Option<Vec<u32>>) -> Result<Self> {
        let rows = u32::try_from(m.rows()).map_err(|_| corrupt("too many rows"))?;
        let dim = u32::try_from(m.cols()).map_err(|_| corrupt("dimension too large"))?;
        Self::new(
            rows,
            dim,
            ids,
            m.as_slice().iter().map(|&x| x as f32).collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows as usize
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn ids(&self) -> Option<&[u32]> {
        self.ids.as_deref()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_f32(self.rows(), self.dim(), &self.data)
            .map_err(|e| corrupt(format!("payload: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ids_len = self.ids.as_ref().map_or(0, |v| v.len() * 4);
        let mut out = Vec::with_capacity(HEADER_LEN + ids_len + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.push(u8::from(self.ids.is_some()));
        for id in self.ids.iter().flatten() {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let (rows, dim) = (word(8), word(12));
        let has_ids = match bytes[16] {
            0 => false,
            1 => true,
            flag => return Err(corrupt(format!("identity flag {flag}"))),
        };
        let ids_len = if has_ids { rows as u64 * 4 } else { 0 };
        let payload_len = rows as u64 * dim as u64 * 4;
        let expected = HEADER_LEN as u64 + ids_len + payload_len;
        if bytes.len() as u64 != expected {
            return Err(corrupt(format!(
                "{rows}x{dim} needs {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let ids_end = HEADER_LEN + ids_len as usize;
        let ids = has_ids.then(|| {
            bytes[HEADER_LEN..ids_end]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        });
        let data = bytes[ids_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(rows, dim, ids, data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::CorruptFile(msg) => corrupt(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }
}
