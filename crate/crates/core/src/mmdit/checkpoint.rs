//! Binary checkpoint layout:
//!
//! ```text
//! 8 bytes   magic "PFCKPT01"
//! u64 LE    header length H
//! H bytes   JSON header {kind, config, tensors: [{name, shape}], extra}
//! ...       every tensor's f32 values, little-endian, in header order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: ModelConfig,
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorBlob>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: ModelConfig,
    tensors: Vec<(String, Vec<usize>)>,
    extra: serde_json::Value,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        kind: ckpt.kind.clone(),
        config: ckpt.config.clone(),
        tensors: ckpt.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect(),
        extra: ckpt.extra.clone(),
    };
    let head = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + head.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(head.len() as u64).to_le_bytes());
    buf.extend_from_slice(&head);
    for t in &ckpt.tensors {
        if t.data.len() != t.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!("tensor {} does not match its shape", t.name)));
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut at = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, shape) in header.tensors {
        let n: usize = shape.iter().product();
        let raw = bytes.get(at..at + 4 * n).ok_or_else(|| bad(&format!("tensor {name} is truncated")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        at += 4 * n;
        tensors.push(TensorBlob { name, shape, data });
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        extra: header.extra,
        tensors,
    })
}
