//! Binary checkpoint: `"CTKD"`, u32 version, u64 blob length, the config
//! blob (canonical model text plus `meta.*` lines), then one record per
//! tensor: u32 name length, name, u8 rank, u64 extents, f32 payload. All
//! integers little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::ModelConfig;
use super::params::ParamStore;
use super::Model;
use crate::config::FlatConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CTKD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model as loaded from disk, with the free-form metadata stored next
/// to it (training step, seed, optimizer constants, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, String>,
}

fn blob(config: &ModelConfig, meta: &BTreeMap<String, String>) -> Result<String> {
    let mut text = config.to_text("model");
    for (k, v) in meta {
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-')) {
            return Err(Error::Contract(format!("metadata key {k:?} is not a config key")));
        }
        if v.contains(['\n', '#']) || v.trim() != v {
            return Err(Error::Contract(format!("metadata value {v:?} for `{k}` cannot be stored")));
        }
        text.push_str(&format!("meta.{k} = {v}\n"));
    }
    Ok(text)
}

/// Serialises `model` at single precision.
pub fn encode_checkpoint(model: &Model, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let text = blob(model.config(), meta)?;
    let mut out = Vec::with_capacity(16 + text.len() + 4 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes through a temporary sibling file and a rename, so an existing
/// checkpoint at `path` is never left half-written.
pub fn save_checkpoint(path: &Path, model: &Model, meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses a checkpoint image. `path` is only used in error messages.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing CTKD magic"));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = usize::try_from(cur.u64()?).map_err(|_| Error::format(path, "config blob length overflows"))?;
    let text = std::str::from_utf8(cur.take(len)?).map_err(|_| Error::format(path, "config blob is not UTF-8"))?;
    let mut flat = FlatConfig::parse(text).map_err(|e| Error::format(path, e.to_string()))?;
    let meta_cfg = flat.take_section("meta");
    let meta: BTreeMap<String, String> = meta_cfg
        .keys()
        .map(|k| (k.to_string(), meta_cfg.peek(k).unwrap_or_default().to_string()))
        .collect();
    let config = ModelConfig::from_text_strict(&flat.to_text(), "model").map_err(|e| Error::format(path, e.to_string()))?;

    let mut params = ParamStore::new();
    while !cur.done() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).filter(|&n| n > 0);
        let numel = numel.ok_or_else(|| Error::Integrity(format!("tensor `{name}` has bad shape {shape:?}")))?;
        let payload = cur.take(numel.checked_mul(4).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Integrity(format!("tensor `{name}`: {e}")))?;
        params.insert(name, t).map_err(|e| Error::Integrity(e.to_string()))?;
    }
    let model = Model::from_parts(config, params)?;
    Ok(Checkpoint { model, meta })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

/// Loads and insists the stored model is exactly `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.model.config() != expected {
        let want = expected.to_text("model");
        let got = ck.model.config().to_text("model");
        let diff: Vec<String> = want
            .lines()
            .zip(got.lines())
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("expected `{a}`, found `{b}`"))
            .collect();
        return Err(Error::ConfigMismatch(format!("{}: {}", path.display(), diff.join("; "))));
    }
    Ok(ck)
}
