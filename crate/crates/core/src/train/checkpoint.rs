//! Checkpoints: a JSON manifest describing every parameter plus a raw
//! little-endian f32 blob, ordered lexicographically by parameter name so
//! that save -> load -> save is byte-identical.

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::model::{HybridGNetConfig, Model, ModelKind, ModelParams};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: ModelKind,
    organ_counts: Vec<usize>,
    model_config: HybridGNetConfig,
    train_config: TrainConfig,
    pca_components: Option<usize>,
    epoch: usize,
    val_loss: f64,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub organ_counts: Vec<usize>,
    pub model_config: HybridGNetConfig,
    pub train_config: TrainConfig,
    pub pca_components: Option<usize>,
    pub epoch: usize,
    pub val_loss: f64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn snapshot(model: &Model, cfg: &TrainConfig, epoch: usize, val_loss: f64) -> Self {
        Checkpoint {
            kind: model.kind,
            organ_counts: model.topology().organ_counts.clone(),
            model_config: model.config.clone(),
            train_config: cfg.clone(),
            pca_components: model.pca_components,
            epoch,
            val_loss,
            params: model.params.clone(),
        }
    }

    /// Rebuild a ready-to-run model carrying this checkpoint's weights.
    pub fn to_model(&self) -> Result<Model> {
        let topology = Topology::new(self.organ_counts.clone())?;
        let mut model = Model::new(
            self.kind,
            self.model_config.clone(),
            &topology,
            self.pca_components,
            0,
        )?;
        let expected: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        let stored: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        if expected != stored {
            return Err(Error::Load(format!(
                "checkpoint parameters do not match the {} architecture \
                 ({} stored, {} expected)",
                self.kind,
                stored.len(),
                expected.len()
            )));
        }
        for (name, param) in self.params.iter() {
            model.params.set_value(name, param.value.clone())?;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, param) in ckpt.params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: param.value.shape.clone(),
            offset: blob.len(),
            trainable: param.trainable,
        });
        for v in &param.value.data {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        kind: ckpt.kind,
        organ_counts: ckpt.organ_counts.clone(),
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        pca_components: ckpt.pca_components,
        epoch: ckpt.epoch,
        val_loss: ckpt.val_loss,
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Load(format!("checkpoint manifest: {e}")))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    std::fs::write(dir.join(PARAMS_FILE), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Load(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("{}: {e}", manifest_path.display())))?;
    let blob_path = dir.join(PARAMS_FILE);
    let blob = std::fs::read(&blob_path)
        .map_err(|e| Error::Load(format!("{}: {e}", blob_path.display())))?;

    let expected: usize = manifest
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum();
    if blob.len() != expected {
        return Err(Error::Load(format!(
            "{}: blob is {} bytes, manifest describes {expected}",
            blob_path.display(),
            blob.len()
        )));
    }

    let mut params = ModelParams::default();
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel * 4;
        if end > blob.len() {
            return Err(Error::Load(format!(
                "{}: parameter {:?} overruns the blob",
                blob_path.display(),
                entry.name
            )));
        }
        let data: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        params.insert(&entry.name, tensor, entry.trainable);
    }

    Ok(Checkpoint {
        kind: manifest.kind,
        organ_counts: manifest.organ_counts,
        model_config: manifest.model_config,
        train_config: manifest.train_config,
        pca_components: manifest.pca_components,
        epoch: manifest.epoch,
        val_loss: manifest.val_loss,
        params,
    })
}
