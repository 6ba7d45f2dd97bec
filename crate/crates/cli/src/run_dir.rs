//! On-disk layout shared by every command and the selection service.

use std::path::{Path, PathBuf};

use serde::Serialize;
use styletune_core::checkpoint::{load_model, write_atomic};
use styletune_core::data::Oracles;
use styletune_core::feedback::{ProxyEmbedder, SamplePool, SelectionRecord};
use styletune_core::model::ModelWeights;
use styletune_core::text::Vocabulary;
use styletune_core::tokenizer::Codebook;

use crate::error::{CliError, CliResult};

pub const SUBDIRS: [&str; 5] = ["data", "checkpoints", "pools", "selections", "metrics"];

#[derive(Debug, Clone)]
pub struct RunDirectory {
    pub root: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| missing(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn missing(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::User(format!(
            "{} not found; run the earlier stages first",
            path.display()
        ))
    } else {
        CliError::Internal(format!("{}: {e}", path.display()))
    }
}

/// Pool ids become file and URL path segments.
pub fn valid_pool_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.')
        && !id.starts_with('.')
}

impl RunDirectory {
    /// Opens `root`, creating it and its subdirectories if needed.
    pub fn create(root: impl Into<PathBuf>) -> CliResult<Self> {
        let root = root.into();
        for d in SUBDIRS {
            std::fs::create_dir_all(root.join(d))?;
        }
        Ok(Self { root })
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn pool_dir(&self, pool_id: &str) -> PathBuf {
        self.root.join("pools").join(pool_id)
    }

    pub fn selection(&self, pool_id: &str) -> PathBuf {
        self.root.join("selections").join(format!("{pool_id}.json"))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(name)
    }

    /// Resolves a user-supplied checkpoint path: bare names live under
    /// `checkpoints/`.
    pub fn resolve_checkpoint(&self, p: &Path) -> PathBuf {
        if p.components().count() == 1 && !p.exists() {
            self.checkpoint(&p.to_string_lossy())
        } else {
            p.to_path_buf()
        }
    }

    /// Fails if `path` already exists; artifacts are written once.
    pub fn fresh(&self, path: &Path) -> CliResult<()> {
        if path.exists() {
            return Err(CliError::User(format!(
                "{} already exists; artifacts are never overwritten",
                path.display()
            )));
        }
        Ok(())
    }

    /// Records a stage's settings under its name in `config.json`.
    pub fn record_config(&self, stage: &str, value: &impl Serialize) -> CliResult<()> {
        let path = self.root.join("config.json");
        let mut all: serde_json::Map<String, serde_json::Value> = if path.exists() {
            read_json(&path)?
        } else {
            serde_json::Map::new()
        };
        all.insert(stage.into(), serde_json::to_value(value)?);
        write_atomic(&path, &serde_json::to_vec_pretty(&all)?)?;
        Ok(())
    }

    pub fn codebook(&self) -> CliResult<Codebook> {
        let p = self.checkpoint("codebook.bin");
        let bytes = std::fs::read(&p).map_err(|e| missing(&p, e))?;
        Ok(Codebook::from_bytes(&bytes)?)
    }

    pub fn vocab(&self) -> CliResult<Vocabulary> {
        let p = self.checkpoint("vocab.json");
        let bytes = std::fs::read(&p).map_err(|e| missing(&p, e))?;
        Ok(Vocabulary::from_json(&bytes)?)
    }

    pub fn proxy(&self) -> CliResult<ProxyEmbedder> {
        read_json(&self.checkpoint("proxy.json"))
    }

    pub fn oracles(&self) -> CliResult<Oracles> {
        read_json(&self.checkpoint("oracles.json"))
    }

    pub fn base(&self) -> CliResult<ModelWeights> {
        let p = self.checkpoint("base.ckpt");
        if !p.exists() {
            return Err(CliError::User(format!(
                "{} not found; run pretrain first",
                p.display()
            )));
        }
        Ok(load_model(&p)?)
    }

    pub fn pool(&self, pool_id: &str) -> CliResult<SamplePool> {
        read_json(&self.pool_dir(pool_id).join("manifest.json"))
    }

    pub fn read_selection(&self, pool_id: &str) -> CliResult<SelectionRecord> {
        read_json(&self.selection(pool_id))
    }

    pub fn write_selection(&self, rec: &SelectionRecord) -> CliResult<()> {
        write_atomic(
            &self.selection(&rec.pool_id),
            &serde_json::to_vec_pretty(rec)?,
        )?;
        Ok(())
    }

    /// Ids of every pool with a manifest, sorted.
    pub fn pool_ids(&self) -> CliResult<Vec<String>> {
        let mut ids = Vec::new();
        let dir = self.root.join("pools");
        if !dir.exists() {
            return Ok(ids);
        }
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_pool_id(&name) && entry.path().join("manifest.json").exists() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }
}
