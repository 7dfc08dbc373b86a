//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! `b"VEMBCKPT"`, `u32` version, `u64` header length, header JSON
//! (model config, preprocessing hash, embedding width), `u32` tensor count,
//! then per tensor: `u32` name length, name, `u32` rank, `u64` dims,
//! `f64` values.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::numcore::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"VEMBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub preprocessing_hash: String,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    preprocessing_hash: String,
    embedding_width: usize,
}

fn encode(params: &ModelParams, config: &ModelConfig, preprocessing_hash: &str) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        preprocessing_hash: preprocessing_hash.to_string(),
        embedding_width: config.embedding_width(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(64 + header.len() + params.n_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let names = ModelParams::names(config);
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated: needed {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = r.len()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.config.validate()?;
    if header.embedding_width != header.config.embedding_width() {
        return Err(Error::Checkpoint(
            "embedding width disagrees with config".into(),
        ));
    }
    let names = ModelParams::names(&header.config);
    let count = r.u32()? as usize;
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors, config implies {}",
            names.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for expected in &names {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != expected {
            return Err(Error::Checkpoint(format!(
                "found tensor `{name}`, expected `{expected}`"
            )));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(
            Tensor::from_vec(&dims, values)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?,
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let params = ModelParams::from_tensors(&header.config, tensors)
        .map_err(|e| Error::Checkpoint(format!("shape inconsistency: {e}")))?;
    Ok(Checkpoint {
        config: header.config,
        preprocessing_hash: header.preprocessing_hash,
        params,
    })
}

/// Writes atomically: a temporary file in the target directory is renamed
/// into place.
pub fn save_checkpoint(
    params: &ModelParams,
    config: &ModelConfig,
    preprocessing_hash: &str,
    path: &Path,
) -> Result<()> {
    let bytes = encode(params, config, preprocessing_hash);
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes)
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
