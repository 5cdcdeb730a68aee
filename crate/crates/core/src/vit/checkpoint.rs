//! Weight checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "STIRW01\0"
//! config block     u32 image_h, image_w, channels, patch_size,
//!                      embed_dim, num_heads, depth
//!                  f64 mlp_ratio
//!                  u8  normalize_embeddings (0/1)
//!                  f64 head_dropout
//! param count      u32
//! per parameter    u32 name length, UTF-8 name,
//!                  u32 rank, rank × u32 dims,
//!                  numel × f32 values
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{EncoderConfig, EncoderWeights};
use crate::data::binio::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STIRW01\0";

pub fn write_to(mut w: impl Write, weights: &EncoderWeights<f32>) -> io::Result<()> {
    let c = weights.config();
    w.write_all(MAGIC)?;
    for v in [c.image_h, c.image_w, c.channels, c.patch_size, c.embed_dim, c.num_heads, c.depth] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&c.mlp_ratio.to_le_bytes())?;
    w.write_all(&[c.normalize_embeddings as u8])?;
    w.write_all(&c.head_dropout.to_le_bytes())?;
    let params: Vec<_> = weights.iter().collect();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write(path: impl AsRef<Path>, weights: &EncoderWeights<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_to(&mut buf, weights)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<EncoderWeights<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = Reader::new(&bytes);
    if rd.take(8)? != MAGIC {
        return Err(Error::format("not a weight checkpoint (bad magic)"));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = rd.u32()? as usize;
    }
    let config = EncoderConfig {
        image_h: dims[0],
        image_w: dims[1],
        channels: dims[2],
        patch_size: dims[3],
        embed_dim: dims[4],
        num_heads: dims[5],
        depth: dims[6],
        mlp_ratio: rd.f64()?,
        normalize_embeddings: rd.u8()? != 0,
        head_dropout: rd.f64()?,
    };
    config.validate().map_err(|e| Error::format(e.to_string()))?;
    let count = rd.u32()? as usize;
    let mut params = IndexMap::with_capacity(count);
    for _ in 0..count {
        let len = rd.u32()? as usize;
        let name = std::str::from_utf8(rd.take(len)?)
            .map_err(|_| Error::format("parameter name is not UTF-8"))?
            .to_string();
        let rank = rd.u32()? as usize;
        if rank > 8 {
            return Err(Error::format(format!("parameter `{name}` has rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| rd.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let data = rd.f32s(numel)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("parameter `{name}`: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::format(format!("duplicate parameter `{name}`")));
        }
    }
    if !rd.is_empty() {
        return Err(Error::format("trailing bytes after last parameter"));
    }
    EncoderWeights::from_params(config, params).map_err(|e| Error::format(e.to_string()))
}

pub fn read(path: impl AsRef<Path>) -> Result<EncoderWeights<f32>> {
    read_from(fs::File::open(path)?)
}
