//! Checkpoint files: a JSON manifest naming each parameter's group, shape and
//! byte range, plus one raw little-endian `f64` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::vlm::{Group, ToyVLM, Trainable};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "switchkd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Location of one parameter inside the blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of `f64` values.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub trainable: Trainable,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub groups: BTreeMap<Group, Vec<ParamEntry>>,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `path` (manifest) and a sibling `.bin` blob.
pub fn save_checkpoint(model: &ToyVLM, path: &Path) -> Result<Manifest> {
    let blob = blob_path(path);
    let blob_name = blob
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("checkpoint path {} has no file name", path.display())))?
        .to_string();
    let mut bytes = Vec::with_capacity(model.num_params() * 8);
    let mut groups: BTreeMap<Group, Vec<ParamEntry>> = BTreeMap::new();
    for (group, p) in model.params() {
        groups.entry(group).or_default().push(ParamEntry {
            name: p.name.clone(),
            shape: p.shape().to_vec(),
            offset: bytes.len(),
            len: p.values().len(),
        });
        for v in p.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config,
        trainable: model.trainable,
        blob: blob_name,
        groups,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ToyVLM> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let blob = path.parent().unwrap_or(Path::new("")).join(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;

    let mut model = ToyVLM::zeros(manifest.config)?;
    model.trainable = manifest.trainable;
    for group in Group::ALL {
        let entries = manifest.groups.get(&group).map(Vec::as_slice).unwrap_or(&[]);
        let params = model.group_params_mut(group);
        if entries.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint group {group} lists {} parameters, model has {}",
                entries.len(),
                params.len()
            )));
        }
        for (entry, p) in entries.iter().zip(params) {
            if entry.name != p.name || entry.shape != p.shape() || entry.len != p.values().len() {
                return Err(Error::Config(format!(
                    "checkpoint entry {} {:?} does not match model parameter {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.shape()
                )));
            }
            let end = entry.offset + entry.len * 8;
            let raw = bytes.get(entry.offset..end).ok_or(Error::Bounds {
                index: end,
                len: bytes.len(),
            })?;
            for (v, chunk) in p.value.values_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8 bytes"));
            }
        }
    }
    Ok(model)
}
