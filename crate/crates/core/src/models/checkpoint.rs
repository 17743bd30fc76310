//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "RGNNCKPT"
//! version    u32       1
//! header_len u32
//! header     JSON      {"config": ModelConfig, "dims": ModelDims}
//! dtype      u8        4 = f32, 8 = f64
//! count      u32       number of tensors
//! tensors    count × { rows u64, cols u64, rows·cols values }
//! checksum   32 bytes  SHA-256 of everything before it
//! ```
//!
//! Tensors follow the model's parameter declaration order. Loading into a
//! different precision casts every value.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, ModelDims};
use super::params::{build_model, ModelParams};
use crate::error::{Error, Result};
use crate::kernels::ParamSet;
use crate::tensor::{Precision, Real};

pub const MAGIC: &[u8; 8] = b"RGNNCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dims: ModelDims,
}

pub fn encode<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, dims: &ModelDims) -> Result<Vec<u8>> {
    params.check(cfg, dims)?;
    let header = serde_json::to_vec(&Header { config: *cfg, dims: *dims })
        .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let mut out = Vec::with_capacity(64 + header.len() + params.num_params() * T::PRECISION.bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.push(T::PRECISION.bytes() as u8);
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for &v in t.as_slice() {
            match T::PRECISION {
                Precision::Single => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                Precision::Double => out.extend_from_slice(&v.f64().to_le_bytes()),
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses and verifies a checkpoint, returning the parameters in precision
/// `T` with the config and dims they were saved with.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(ModelParams<T>, ModelConfig, ModelDims)> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch: the file is corrupt".into()));
    }
    let mut c = Cursor { buf: body, pos: MAGIC.len() };
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let hlen = c.u32()? as usize;
    let header: Header =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let width = c.take(1)?[0] as usize;
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unknown dtype width {width}")));
    }
    let count = c.u32()? as usize;
    let mut params: ModelParams<T> = build_model(&header.config, &header.dims, 0)?;
    {
        let slots = params.tensors_mut();
        if slots.len() != count {
            return Err(Error::Checkpoint(format!("{count} tensors stored, the config declares {}", slots.len())));
        }
        for (i, t) in slots.into_iter().enumerate() {
            let (r, k) = (c.u64()? as usize, c.u64()? as usize);
            if (r, k) != t.shape() {
                return Err(Error::Checkpoint(format!("tensor {i} is {r}x{k}, expected {:?}", t.shape())));
            }
            let raw = c.take(r * k * width)?;
            for (v, chunk) in t.as_mut_slice().iter_mut().zip(raw.chunks_exact(width)) {
                *v = T::of(if width == 4 {
                    f32::from_le_bytes(chunk.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(chunk.try_into().unwrap())
                });
            }
        }
    }
    if c.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok((params, header.config, header.dims))
}

pub fn save<T: Real>(path: &Path, params: &ModelParams<T>, cfg: &ModelConfig, dims: &ModelDims) -> Result<()> {
    let bytes = encode(params, cfg, dims)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(ModelParams<T>, ModelConfig, ModelDims)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
