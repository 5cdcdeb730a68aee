//! Raw image payload file.
//!
//! ```text
//! magic        8 bytes "STIRI01\0"
//! count        u32
//! h, w, c      u32 each
//! ids          count × u64
//! pixels       count × h·w·c × f32, row-major [h, w, c] per image
//! ```
//! All values little-endian. Manifest sources point into it as
//! `<file>#<index>`.

use std::fs;
use std::path::Path;

use super::binio::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ItemId;

pub const MAGIC: &[u8; 8] = b"STIRI01\0";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFile {
    shape: [usize; 3],
    ids: Vec<ItemId>,
    pixels: Vec<f32>,
}

impl ImageFile {
    pub fn new(shape: [usize; 3], items: &[(ItemId, &Tensor<f32>)]) -> Result<Self> {
        let mut ids = Vec::with_capacity(items.len());
        let mut pixels = Vec::with_capacity(items.len() * shape.iter().product::<usize>());
        for (id, img) in items {
            if img.shape() != shape {
                return Err(Error::input(format!("image {id} has shape {:?}, expected {shape:?}", img.shape())));
            }
            ids.push(*id);
            pixels.extend_from_slice(img.data());
        }
        Ok(Self { shape, ids, pixels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<(ItemId, Tensor<f32>)> {
        let id = *self.ids.get(idx)?;
        let n: usize = self.shape.iter().product();
        let img = Tensor::new(self.shape.to_vec(), self.pixels[idx * n..(idx + 1) * n].to_vec()).ok()?;
        Some((id, img))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.ids.len() + 4 * self.pixels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for d in self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&id.0.to_le_bytes());
        }
        for v in &self.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        if rd.take(8)? != MAGIC {
            return Err(Error::format("not an image payload file (bad magic)"));
        }
        let count = rd.u32()? as usize;
        let shape = [rd.u32()? as usize, rd.u32()? as usize, rd.u32()? as usize];
        if shape.contains(&0) {
            return Err(Error::format("zero image dimension"));
        }
        let ids = (0..count).map(|_| rd.u64().map(ItemId)).collect::<Result<Vec<_>>>()?;
        let n = count
            .checked_mul(shape.iter().product())
            .ok_or_else(|| Error::format("pixel count overflow"))?;
        let pixels = rd.f32s(n)?;
        if !rd.is_empty() {
            return Err(Error::format("trailing bytes in image payload file"));
        }
        Ok(Self { shape, ids, pixels })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
