//! Binary checkpoints: `[u32 LE header length][JSON header][LE f64 payload]`.
//!
//! The header records the kind, the config and, for every tensor, its name,
//! shape and byte offset into the payload.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterConfig, AdapterParams};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    /// Number of adapter scalars, so parameter counts can be audited offline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_params: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

fn encode(
    kind: &str,
    config: serde_json::Value,
    num_params: Option<usize>,
    tensors: &[(String, Vec<usize>, &[f64])],
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, shape, data) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f64".into(),
            offset: payload.len(),
        });
        for v in data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        version: VERSION,
        kind: kind.into(),
        config,
        num_params,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(4 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn decode(bytes: &[u8], kind: &str) -> Result<(Header, HashMap<String, Vec<f64>>)> {
    if bytes.len() < 4 {
        return Err(Error::Format(
            "checkpoint shorter than its length prefix".into(),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(4..4 + hlen)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    if header.kind != kind {
        return Err(Error::Format(format!(
            "expected a {kind} checkpoint, found {}",
            header.kind
        )));
    }
    let payload = &bytes[4 + hlen..];
    let mut tensors = HashMap::new();
    for t in &header.tensors {
        if t.dtype != "f64" {
            return Err(Error::Format(format!(
                "{}: unsupported dtype {}",
                t.name, t.dtype
            )));
        }
        let n: usize = t.shape.iter().product();
        let raw = payload
            .get(t.offset..t.offset + 8 * n)
            .ok_or_else(|| Error::Format(format!("{}: payload out of range", t.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(t.name.clone(), data);
    }
    Ok((header, tensors))
}

pub fn model_to_bytes(w: &ModelWeights) -> Result<Vec<u8>> {
    let tensors: Vec<(String, Vec<usize>, &[f64])> = w
        .tensors()
        .into_iter()
        .map(|(n, s, d)| (n, s, d.as_slice()))
        .collect();
    encode("model", serde_json::to_value(w.cfg)?, None, &tensors)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    let (header, mut tensors) = decode(bytes, "model")?;
    let cfg: ModelConfig = serde_json::from_value(header.config)?;
    ModelWeights::from_tensors(cfg, |name| tensors.remove(name))
}

pub fn adapter_to_bytes(p: &AdapterParams) -> Result<Vec<u8>> {
    encode(
        "adapter",
        serde_json::to_value(p.cfg)?,
        Some(p.num_scalars()),
        &p.tensors(),
    )
}

pub fn adapter_from_bytes(bytes: &[u8]) -> Result<AdapterParams> {
    let (header, mut tensors) = decode(bytes, "adapter")?;
    let cfg: AdapterConfig = serde_json::from_value(header.config)?;
    AdapterParams::from_tensors(cfg, |name| tensors.remove(name))
}

/// Reads only the header of a checkpoint.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 {
        return Err(Error::Format(
            "checkpoint shorter than its length prefix".into(),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let h = bytes
        .get(4..4 + hlen)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    Ok(serde_json::from_slice(h)?)
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a model's checkpoint bytes.
pub fn model_hash(w: &ModelWeights) -> Result<String> {
    Ok(sha256_hex(&model_to_bytes(w)?))
}

pub fn adapter_hash(p: &AdapterParams) -> Result<String> {
    Ok(sha256_hex(&adapter_to_bytes(p)?))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_model(path: &Path, w: &ModelWeights) -> Result<()> {
    write_atomic(path, &model_to_bytes(w)?)
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    model_from_bytes(&std::fs::read(path)?)
}

pub fn save_adapter(path: &Path, p: &AdapterParams) -> Result<()> {
    write_atomic(path, &adapter_to_bytes(p)?)
}

pub fn load_adapter(path: &Path) -> Result<AdapterParams> {
    adapter_from_bytes(&std::fs::read(path)?)
}
