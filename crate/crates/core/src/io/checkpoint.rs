//! Checkpoint directories: `weights.bin` holds every named parameter and
//! `manifest.json` the configuration needed to rebuild the network.
//!
//! `weights.bin` layout: magic `MDRC`, version `u16`, entry count `u32`,
//! then per entry a `u32` name length, the UTF-8 name, a `u64` byte length
//! and an embedded tensor file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor_file::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::model::{DanceModel, DanceModelConfig, LossParams, TrainOptions};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"MDRC";
pub const VERSION: u16 = 1;
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: DanceModelConfig,
    pub loss_params: LossParams,
    pub train: Option<TrainOptions>,
    /// Seed the weights were initialized from.
    pub seed: u64,
    pub step: u64,
}

pub fn encode_weights(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let blob = encode_tensor(t)?;
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let short = || Error::Format("weights container is truncated".into());
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes.get(*pos..*pos + n).ok_or_else(short)?;
        *pos += n;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Format("bad magic, not a weights container".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported weights container version {version}"
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(take(&mut pos, n)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
        entries.push((name, decode_tensor(take(&mut pos, len)?)?));
    }
    if pos != bytes.len() {
        return Err(Error::Format(
            "trailing bytes after weights container".into(),
        ));
    }
    Ok(entries)
}

/// Writes `weights.bin` and `manifest.json` into `dir`, creating it if needed.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &DanceModel,
    manifest: &CheckpointManifest,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let entries: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    fs::write(dir.join(WEIGHTS_FILE), encode_weights(&entries)?)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(manifest)? + "\n",
    )?;
    Ok(())
}

/// Rebuilds the network from the manifest and loads every parameter.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(DanceModel, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut model = DanceModel::new(manifest.config, manifest.seed)?;
    let entries = decode_weights(&fs::read(dir.join(WEIGHTS_FILE))?)?;
    if entries.len() != model.params.len() {
        return Err(Error::invalid(format!(
            "checkpoint has {} tensors, the network needs {}",
            entries.len(),
            model.params.len()
        )));
    }
    for (name, t) in entries {
        let id = model.params.lookup(&name).ok_or_else(|| {
            Error::invalid(format!("checkpoint tensor {name} matches no parameter"))
        })?;
        if model.params.value(id).shape() != t.shape() {
            return Err(Error::invalid(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                model.params.value(id).shape()
            )));
        }
        *model.params.value_mut(id) = t;
    }
    Ok((model, manifest))
}
