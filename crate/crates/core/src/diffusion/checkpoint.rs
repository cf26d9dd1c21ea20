//! Checkpoint directories: a `manifest.json` plus one raw f32le file per
//! parameter tensor, laid out under `tensors/` by the parameter address.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserConfig, ScheduleSpec};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::util;
use crate::volume::{read_f32_raw, write_f32_raw};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub step: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    /// Hash over all tensor hashes in table order; the checkpoint identity.
    pub checksum: String,
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("tensors").join(format!("{name}.f32"))
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ParamSet,
    config: &DenoiserConfig,
    schedule: ScheduleSpec,
    step: usize,
    seed: u64,
) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.len());
    let mut all = Vec::new();
    for (name, value) in params.iter() {
        let path = tensor_path(dir, name);
        fs::create_dir_all(path.parent().unwrap())?;
        write_f32_raw(&path, value)?;
        let bytes = fs::read(&path)?;
        let hash = util::content_hash(&bytes);
        all.extend_from_slice(name.as_bytes());
        all.extend_from_slice(hash.as_bytes());
        tensors.push(TensorEntry { name: name.to_string(), shape: value.shape().to_vec(), hash });
    }
    let meta = CheckpointMeta {
        config: config.clone(),
        schedule,
        step,
        seed,
        checksum: util::content_hash(&all),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, CheckpointMeta)> {
    let manifest = dir.join("manifest.json");
    if !manifest.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint manifest {}", manifest.display())));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(manifest)?)?;
    let mut params = ParamSet::new();
    for entry in &meta.tensors {
        let value = read_f32_raw(&tensor_path(dir, &entry.name), &entry.shape)?;
        params.insert(&entry.name, value);
    }
    Ok((params, meta))
}

/// The stored checkpoint identity without loading tensor data.
pub fn checkpoint_checksum(dir: &Path) -> Result<String> {
    let manifest = dir.join("manifest.json");
    if !manifest.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint manifest {}", manifest.display())));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(manifest)?)?;
    Ok(meta.checksum)
}
