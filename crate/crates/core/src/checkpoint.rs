//! Binary checkpoint format.
//!
//! ```text
//! "ACLF"                       magic
//! u32                          format version
//! u32 + UTF-8 JSON             metadata
//! u32                          tensor count
//! per tensor:
//!   u32 + UTF-8                name
//!   u32                        rank
//!   u32 x rank                 dims
//!   f32 x prod(dims)           row-major data
//! ```
//!
//! Everything is little-endian. Saving is deterministic, so
//! save -> load -> save reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Cursor, Read, Seek};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{len_u32, write_atomic, ByteReader, ByteWriter};
use crate::nn::{EncoderConfig, ModelParams};
use crate::pretrain::Variant;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACLF";
pub const VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

/// Training metadata stored alongside the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Pipeline stage that produced the file (`pretrain`, `finetune`, ...).
    pub stage: String,
    pub variant: Option<Variant>,
    /// Epochs completed (fractional positions are kept in `notes`).
    pub epoch: usize,
    pub seed: u64,
    /// SHA-256 of the effective configuration JSON.
    pub config_digest: String,
    pub encoder: EncoderConfig,
    /// Whether the projection head is needed downstream; it is kept for
    /// completeness but fine-tuning discards it.
    pub head_essential: bool,
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

/// Name and shape of a stored tensor plus where its data starts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub data_offset: u64,
}

/// Header information available without reading tensor data.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointIndex {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorHeader>,
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: ModelParams) -> Self {
        Checkpoint { meta, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.string(&serde_json::to_string(&self.meta)?)?;
        let named = self.params.named_tensors();
        w.u32(len_u32(named.len())?);
        for (name, t) in named {
            w.string(&name)?;
            w.u32(len_u32(t.rank())?);
            for &d in t.shape() {
                w.u32(len_u32(d)?);
            }
            w.f32s(t.data());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_checkpoint(&mut ByteReader::new(Cursor::new(bytes), WHAT))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        read_checkpoint(&mut ByteReader::new(BufReader::new(f), WHAT))
    }

    /// Fails unless the stored configuration digest equals `expected`.
    pub fn verify_digest(&self, expected: &str) -> Result<()> {
        if self.meta.config_digest != expected {
            return Err(Error::Config(format!(
                "checkpoint config digest {} does not match expected {expected}",
                self.meta.config_digest
            )));
        }
        Ok(())
    }
}

fn read_preamble<R: Read + Seek>(r: &mut ByteReader<R>) -> Result<(u32, CheckpointMeta, usize)> {
    let magic = r.exact(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            what: WHAT,
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            what: WHAT,
            offset: 4,
            detail: format!("unsupported format version {version}, this build reads {VERSION}"),
        });
    }
    let meta_at = r.offset();
    let json = r.string("metadata")?;
    let meta: CheckpointMeta = serde_json::from_str(&json).map_err(|e| Error::Format {
        what: WHAT,
        offset: meta_at,
        detail: format!("metadata: {e}"),
    })?;
    let count = r.u32("tensor count")? as usize;
    Ok((version, meta, count))
}

fn read_tensor_header<R: Read + Seek>(r: &mut ByteReader<R>) -> Result<(String, Vec<usize>)> {
    let name = r.string("tensor name")?;
    let rank = r.u32("tensor rank")? as usize;
    if rank > 8 {
        return Err(r.error(format!("tensor `{name}` has implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("tensor dims")? as usize);
    }
    Ok((name, shape))
}

fn read_checkpoint<R: Read + Seek>(r: &mut ByteReader<R>) -> Result<Checkpoint> {
    let (_, meta, count) = read_preamble(r)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, shape) = read_tensor_header(r)?;
        let n = shape.iter().product();
        let data = r.f32s(n, "tensor data")?;
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(r.error(format!("duplicate tensor `{name}`")));
        }
    }
    r.expect_end()?;
    let params = ModelParams::from_named(&meta.encoder, meta.seed, tensors)?;
    Ok(Checkpoint { meta, params })
}

/// Reads metadata and tensor headers, seeking past all tensor data.
pub fn scan(path: impl AsRef<Path>) -> Result<CheckpointIndex> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(BufReader::new(f), WHAT);
    let (version, meta, count) = read_preamble(&mut r)?;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, shape) = read_tensor_header(&mut r)?;
        let data_offset = r.offset();
        let n: usize = shape.iter().product();
        r.skip(n as u64 * 4, "tensor data")?;
        headers.push(TensorHeader {
            name,
            shape,
            data_offset,
        });
    }
    Ok(CheckpointIndex {
        version,
        meta,
        tensors: headers,
    })
}
