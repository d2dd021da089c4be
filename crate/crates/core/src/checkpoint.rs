//! Model checkpoints: a directory per model holding a versioned binary
//! weights file plus a small JSON metadata record.
//!
//! Writes go through a temp file and an atomic rename so a crash never leaves
//! a half-written checkpoint behind.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DFKW";
const FORMAT_VERSION: u32 = 1;

/// Metadata stored beside the weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelMeta {
    pub format_version: u32,
    pub arch_id: String,
    pub label_count: usize,
    pub feature_dim: usize,
    pub bn_layer_count: usize,
    /// `(C, H, W)` the model expects.
    pub input_shape: (usize, usize, usize),
    /// Pixel-range convention; this crate uses `"unit"` for `[0, 1]`.
    pub pixel_range: String,
}

impl ModelMeta {
    pub fn new(
        arch_id: &str,
        label_count: usize,
        feature_dim: usize,
        bn_layer_count: usize,
        input_shape: (usize, usize, usize),
    ) -> Self {
        ModelMeta {
            format_version: FORMAT_VERSION,
            arch_id: arch_id.to_string(),
            label_count,
            feature_dim,
            bn_layer_count,
            input_shape,
            pixel_range: "unit".to_string(),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Save named tensors plus metadata under `dir` (created if absent).
pub fn save_model(dir: &Path, meta: &ModelMeta, state: &[(String, ArrayD<f64>)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, arr) in state {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for d in arr.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&dir.join("weights.bin"), &buf)?;
    let meta_json = serde_json::to_vec_pretty(meta)
        .map_err(|e| Error::Checkpoint(format!("metadata encode: {e}")))?;
    write_atomic(&dir.join("meta.json"), &meta_json)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(
                "weights file truncated (versioned-format error)".into(),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Load metadata and named tensors from a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<(ModelMeta, BTreeMap<String, ArrayD<f64>>)> {
    let meta_path = dir.join("meta.json");
    let mut meta_raw = String::new();
    std::fs::File::open(&meta_path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", meta_path.display())))?
        .read_to_string(&mut meta_raw)?;
    let meta: ModelMeta = serde_json::from_str(&meta_raw)
        .map_err(|e| Error::Checkpoint(format!("metadata decode: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {} (this build reads {FORMAT_VERSION})",
            meta.format_version
        )));
    }

    let bytes = std::fs::read(dir.join("weights.bin"))
        .map_err(|e| Error::Checkpoint(format!("cannot read weights.bin: {e}")))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic in weights.bin (versioned-format error)".into(),
        ));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported weights format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut state = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF8 tensor name".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            vals.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), vals)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        state.insert(name, arr);
    }
    Ok((meta, state))
}
