//! Checkpoint container.
//!
//! ```text
//! magic      8 bytes   "LTDQGCKP"
//! version    u32 LE
//! header_len u64 LE
//! header     JSON      {"config": ModelConfig, "tensors": [{"name", "shape"}, ...]}
//! payload    f64 LE    every tensor, in manifest order, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layout, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LTDQGCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    let header = Header {
        config: params.config.clone(),
        tensors: params
            .names()
            .zip(params.tensors())
            .map(|(name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + params.num_parameters() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    let truncated = || Error::Version("checkpoint is truncated".into());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Version("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).ok_or_else(truncated)?;
    let header: Header = serde_json::from_slice(bytes.get(20..header_end).ok_or_else(truncated)?)
        .map_err(|e| Error::Version(format!("malformed header: {e}")))?;
    header.config.validate()?;
    let layout = Layout::new(&header.config);
    if layout.specs().len() != header.tensors.len() {
        return Err(Error::Version(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            layout.specs().len()
        )));
    }
    let mut offset = header_end;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (entry, spec) in header.tensors.iter().zip(layout.specs()) {
        if entry.name != spec.name || entry.shape != spec.shape {
            return Err(Error::Version(format!(
                "manifest entry {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, spec.name, spec.shape
            )));
        }
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 8;
        let raw = bytes.get(offset..end).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Version(format!("{} trailing bytes after payload", bytes.len() - offset)));
    }
    ModelParams::from_parts(header.config, tensors)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, file)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(file)
}
