//! Versioned checkpoint container: magic, format version, a JSON header and
//! a safetensors payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::domain::{class_order_hash, manifest::write_atomic};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EMOCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub format_version: u32,
    pub class_order_hash: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, tensors: HashMap<String, Tensor>) -> Result<Self> {
        Ok(Self {
            header: CheckpointHeader {
                kind: kind.to_string(),
                format_version: FORMAT_VERSION,
                class_order_hash: class_order_hash(),
                config: serde_json::to_value(config)?,
                extra: serde_json::Value::Null,
            },
            tensors,
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.header.config.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut sorted: Vec<(&String, &Tensor)> = self.tensors.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        let payload = safetensors::serialize(sorted.into_iter().map(|(k, v)| (k.as_str(), v)), None)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let tensors = candle_core::safetensors::load_buffer(&body[hlen..], &Device::Cpu)?;
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// Loads and checks kind and class order.
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes)?;
        ckpt.expect(kind)?;
        Ok(ckpt)
    }

    pub fn expect(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.header.kind
            )));
        }
        if self.header.class_order_hash != class_order_hash() {
            return Err(Error::Checkpoint(format!(
                "class order hash {} does not match {}",
                self.header.class_order_hash,
                class_order_hash()
            )));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_guards() {
        let mut tensors = HashMap::new();
        tensors.insert("a".to_string(), Tensor::new(&[1.0f32, 2.0, 3.0], &Device::Cpu).unwrap());
        let ck = Checkpoint::new("thing", &serde_json::json!({"side": 64}), tensors).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        back.expect("thing").unwrap();
        assert!(back.expect("other").is_err());
        assert_eq!(back.header.config["side"], 64);
        assert_eq!(back.tensor("a").unwrap().to_vec1::<f32>().unwrap(), vec![1.0, 2.0, 3.0]);

        let mut wrong = back;
        wrong.header.class_order_hash = "deadbeef".into();
        assert!(wrong.expect("thing").is_err());

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
