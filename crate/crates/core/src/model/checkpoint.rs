//! Checkpoint directory: `config.json`, `meta.json`, `manifest.json` and
//! `weights.bin` (little-endian f32 in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

/// Whether the engine feeds back latents while listening.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Latent,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: ModelMode,
    /// Last stage that wrote the checkpoint.
    pub stage: String,
    pub steps: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(model.params.len());
    let mut blob = Vec::with_capacity(model.params.num_values() * 4);
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            count: t.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len() * 4;
    }
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write("config.json", serde_json::to_string_pretty(&model.config)?.as_bytes())?;
    write("meta.json", serde_json::to_string_pretty(meta)?.as_bytes())?;
    write("manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write("weights.bin", &blob)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(ckpt_err(dir, "no such checkpoint directory"));
    }
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| ckpt_err(&p, e.to_string()))
    };
    let parse_err = |name: &str, e: serde_json::Error| ckpt_err(&dir.join(name), e.to_string());
    let config: ModelConfig =
        serde_json::from_slice(&read("config.json")?).map_err(|e| parse_err("config.json", e))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&read("meta.json")?).map_err(|e| parse_err("meta.json", e))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(&read("manifest.json")?).map_err(|e| parse_err("manifest.json", e))?;
    let blob = read("weights.bin")?;
    let mut params = ParamSet::new();
    for m in &manifest {
        if m.shape.iter().product::<usize>() != m.count {
            return Err(ckpt_err(dir, format!("{}: shape/count mismatch", m.name)));
        }
        let end = m.offset + m.count * 4;
        let bytes = blob
            .get(m.offset..end)
            .ok_or_else(|| ckpt_err(dir, format!("{}: weights.bin is truncated", m.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(m.name.clone(), Tensor::new(m.shape.clone(), data)?);
    }
    let model = Model::from_params(config, params).map_err(|e| ckpt_err(dir, e.to_string()))?;
    Ok(Checkpoint { model, meta })
}
