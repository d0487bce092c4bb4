//! Binary parameter checkpoints.
//!
//! Layout: magic `OMSDNN1\0`, a `u64` little-endian length followed by that
//! many bytes of JSON metadata, then the raw little-endian `f64` payload.
//! The payload is a concatenation of parameter blocks whose lengths are
//! listed in the metadata under `block_lengths`.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use super::{Mlp, MlpSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OMSDNN1\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub blocks: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            blocks: Vec::new(),
        }
    }

    pub fn push_block(&mut self, block: &[f64]) {
        self.blocks.push(block.to_vec());
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        let lengths: Vec<usize> = self.blocks.iter().map(Vec::len).collect();
        match meta.as_object_mut() {
            Some(obj) => {
                obj.insert("block_lengths".into(), json!(lengths));
            }
            None => return Err(Error::Format("checkpoint metadata must be a JSON object".into())),
        }
        let meta_bytes = serde_json::to_vec(&meta)?;
        let total: usize = lengths.iter().sum();
        let mut out = Vec::with_capacity(16 + meta_bytes.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_bytes);
        for block in &self.blocks {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a parameter checkpoint (bad magic)".into()));
        }
        if bytes.len() < 16 {
            return Err(Error::Integrity("checkpoint truncated in header".into()));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Integrity("checkpoint truncated in metadata".into()))?;
        let mut meta: Value = serde_json::from_slice(&bytes[16..meta_end])
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let lengths: Vec<usize> = meta
            .as_object_mut()
            .and_then(|o| o.remove("block_lengths"))
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| Error::Format("checkpoint metadata lacks block_lengths".into()))?;
        let total: usize = lengths.iter().sum();
        let payload = &bytes[meta_end..];
        if payload.len() != 8 * total {
            return Err(Error::Integrity(format!(
                "checkpoint payload has {} bytes, expected {}",
                payload.len(),
                8 * total
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let blocks = lengths
            .iter()
            .map(|&n| values.by_ref().take(n).collect())
            .collect();
        Ok(Self { meta, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }
}

impl Mlp {
    pub fn to_checkpoint(&self, role: &str, seed: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "mlp",
            "role": role,
            "seed": seed,
            "spec": self.spec(),
        }));
        ck.push_block(self.params());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: MlpSpec = ck
            .meta
            .get("spec")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint has no network spec".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Format(e.to_string())))?;
        let params = ck
            .blocks
            .first()
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint has no parameter block".into()))?;
        Mlp::from_params(spec, params)
    }
}
