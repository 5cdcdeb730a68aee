//! Embedding file.
//!
//! ```text
//! magic     8 bytes "STIRE01\0"
//! dim       u32
//! count     u32
//! dtype     u32   1 = f32, 2 = f64
//! ids       count × u64
//! values    count × dim values, row-major
//! ```
//! All values little-endian. Rows are stored as f32 (dtype 1); dtype 2
//! files are accepted and narrowed on read.

use std::fs;
use std::path::Path;

use super::binio::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ItemId;

pub const MAGIC: &[u8; 8] = b"STIRE01\0";
pub const HEADER_LEN: usize = 20;
const DTYPE_F32: u32 = 1;
const DTYPE_F64: u32 = 2;

/// Item ids aligned with the rows of an embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<ItemId>,
    pub matrix: Tensor<f32>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<ItemId>, matrix: Tensor<f32>) -> Result<Self> {
        let (rows, _) = matrix.dims2()?;
        if rows != ids.len() {
            return Err(Error::input(format!("{} ids for {rows} rows", ids.len())));
        }
        Ok(Self { ids, matrix })
    }

    /// Stacks `[D]` embeddings into a table.
    pub fn from_rows(ids: Vec<ItemId>, rows: &[Tensor<f32>]) -> Result<Self> {
        let dim = rows.first().map(Tensor::len).ok_or_else(|| Error::input("no embeddings"))?;
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            if r.len() != dim {
                return Err(Error::input("embeddings differ in dimension"));
            }
            data.extend_from_slice(r.data());
        }
        Self::new(ids, Tensor::new([rows.len(), dim], data)?)
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.matrix.row(i)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.len() + 4 * self.matrix.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&id.0.to_le_bytes());
        }
        for v in self.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        if rd.take(8)? != MAGIC {
            return Err(Error::format("not an embedding file (bad magic)"));
        }
        let dim = rd.u32()? as usize;
        let count = rd.u32()? as usize;
        let dtype = rd.u32()?;
        if dim == 0 || count == 0 {
            return Err(Error::format(format!("empty embedding file (dim {dim}, count {count})")));
        }
        let ids = (0..count).map(|_| rd.u64().map(ItemId)).collect::<Result<Vec<_>>>()?;
        let n = count.checked_mul(dim).ok_or_else(|| Error::format("value count overflow"))?;
        let values = match dtype {
            DTYPE_F32 => rd.f32s(n)?,
            DTYPE_F64 => rd.f64s(n)?.into_iter().map(|v| v as f32).collect(),
            other => return Err(Error::format(format!("unknown dtype code {other}"))),
        };
        if !rd.is_empty() {
            return Err(Error::format("trailing bytes: dim/count disagree with file size"));
        }
        Self::new(ids, Tensor::new([count, dim], values)?)
    }
}

pub fn write_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    fs::write(path, table.to_bytes())?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::from_bytes(&fs::read(path)?)
}
