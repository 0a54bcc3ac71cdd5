//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FMCKPT1"
//! u32 metadata length, metadata (TOML: step count and the full run config)
//! per tensor, in `ModelParams::tensors` order:
//!     u32 name length, name, u32 rank, rank × u64 dims, f32 data
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FmError, Result};
use crate::model::ModelParams;
use crate::tensor::Scalar;

use super::config::RunConfig;

const MAGIC: &[u8; 6] = b"FMCKPT";
const VERSION: u8 = b'1';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: usize,
    pub run: RunConfig,
}

pub fn encode<S: Scalar>(meta: &CheckpointMeta, params: &ModelParams<S>) -> Result<Vec<u8>> {
    params.check(&meta.run.model)?;
    let text = toml::to_string(meta).map_err(|e| FmError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + text.len() + 4 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, dims, data) in params.tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FmError::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, ModelParams<f64>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let head = r.take(MAGIC.len() + 1, "magic")?;
    if &head[..MAGIC.len()] != MAGIC {
        return Err(FmError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    if head[MAGIC.len()] != VERSION {
        return Err(FmError::Checkpoint(format!(
            "unsupported checkpoint version {:?}",
            head[MAGIC.len()] as char
        )));
    }
    let len = r.u32("metadata length")? as usize;
    let text = std::str::from_utf8(r.take(len, "metadata")?)
        .map_err(|e| FmError::Checkpoint(format!("metadata is not UTF-8: {e}")))?;
    let meta: CheckpointMeta = toml::from_str(text).map_err(|e| FmError::Checkpoint(e.to_string()))?;
    meta.run.validate()?;

    let mut params = ModelParams::<f64>::zeros(&meta.run.model);
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, d, _)| (n, d)).collect();
    for ((want_name, want_dims), (_, dst)) in expected.iter().zip(params.tensors_mut()) {
        let n = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|e| FmError::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let rank = r.u32("tensor rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u64("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != want_name || &dims != want_dims {
            return Err(FmError::Checkpoint(format!(
                "expected tensor {want_name} {want_dims:?}, found {name} {dims:?}"
            )));
        }
        let raw = r.take(4 * dst.len(), name)?;
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")));
        }
    }
    if r.pos != bytes.len() {
        return Err(FmError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((meta, params))
}

/// Writes to a temporary file next to `path`, then renames over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| FmError::Checkpoint(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<S: Scalar>(path: &Path, meta: &CheckpointMeta, params: &ModelParams<S>) -> Result<()> {
    write_atomic(path, &encode(meta, params)?)
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, ModelParams<f64>)> {
    decode(&std::fs::read(path)?)
}
