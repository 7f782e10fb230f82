//! Checkpoint layout (integers little-endian):
//!
//! ```text
//! "CKPT" | u16 version = 1 | u32 header length | JSON header
//! per tensor: u64 FNV-1a of the tensor name | u64 length | length × f64
//! u64 FNV-1a checksum of the tensor records
//! ```
//!
//! Records follow the `EMBS` id-then-values layout but keep full 64-bit
//! precision so a reloaded checkpoint scores bit-identically.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::hash::{fnv1a64, Fnv64};

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub cfg_digest: String,
    pub epoch: u32,
    pub seed: u64,
    pub train_loss: f64,
    pub input_dim: usize,
    pub encoder: EncoderConfig,
    pub tensors: Vec<(String, usize)>,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    header: &CheckpointHeader,
    params: &ModelParams,
) -> Result<()> {
    let names = params.tensor_names();
    let tensors = params.tensors();
    let mut header = header.clone();
    header.input_dim = params.input_dim;
    header.tensors = names.iter().cloned().zip(tensors.iter().map(|t| t.len())).collect();
    let json = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut h = Fnv64::new();
    for (name, t) in names.iter().zip(&tensors) {
        let mut rec = Vec::with_capacity(16 + 8 * t.len());
        rec.extend_from_slice(&fnv1a64(name.as_bytes()).to_le_bytes());
        rec.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for x in t.iter() {
            rec.extend_from_slice(&x.to_le_bytes());
        }
        h.update(&rec);
        w.write_all(&rec)?;
    }
    w.write_all(&h.finish().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn u64_at(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, pos, 8)?.try_into().unwrap()))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ModelParams)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    if take(&bytes, &mut pos, 4)? != CKPT_MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let version = u16::from_le_bytes(take(&bytes, &mut pos, 2)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(&bytes, &mut pos, hlen)?)?;
    let mut params = ModelParams::zeros(header.input_dim, &header.encoder)?;
    let names = params.tensor_names();
    if header.tensors.len() != names.len() {
        return Err(Error::Format("tensor count does not match encoder config".into()));
    }
    let start = pos;
    for ((name, t), (hname, hlen)) in names.iter().zip(params.tensors_mut()).zip(&header.tensors) {
        if name != hname || t.len() != *hlen {
            return Err(Error::Format(format!("unexpected tensor {hname}")));
        }
        let id = u64_at(&bytes, &mut pos)?;
        let len = u64_at(&bytes, &mut pos)? as usize;
        if id != fnv1a64(name.as_bytes()) || len != t.len() {
            return Err(Error::Format(format!("tensor record {name} is corrupt")));
        }
        for (x, c) in t.iter_mut().zip(take(&bytes, &mut pos, 8 * len)?.chunks_exact(8)) {
            *x = f64::from_le_bytes(c.try_into().unwrap());
        }
    }
    let mut h = Fnv64::new();
    h.update(&bytes[start..pos]);
    if u64_at(&bytes, &mut pos)? != h.finish() {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checksum".into()));
    }
    Ok((header, params))
}
