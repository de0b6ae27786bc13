//! Run configuration: JSON file fields, overridden by `HGN_SEED` and then by
//! command-line flags, merged into one fully validated value that is
//! persisted verbatim into the run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hgnet_core::model::{HybridGNetConfig, ModelKind};
use hgnet_core::train::TrainConfig;
use hgnet_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub model_config: HybridGNetConfig,
    pub train_config: TrainConfig,
    /// Dataset manifest path.
    pub dataset: PathBuf,
    pub mask_input: bool,
    pub pca_components: Option<usize>,
}

/// On-disk form: every field optional so a file can override only what it
/// cares about. Unknown keys are rejected to catch typos early.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelKind>,
    model_config: Option<HybridGNetConfig>,
    train_config: Option<TrainConfig>,
    dataset: Option<PathBuf>,
    mask_input: Option<bool>,
    pca_components: Option<usize>,
}

/// Flag-level overrides collected by the train command.
#[derive(Debug, Default)]
pub struct Overrides {
    pub model: Option<ModelKind>,
    pub dataset: Option<PathBuf>,
    pub mask_input: bool,
    pub pca_components: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

/// Seed precedence outside the config file: explicit flag, then `HGN_SEED`,
/// then the default.
pub fn resolve_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("HGN_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("HGN_SEED {v:?} is not a u64"))),
        Err(_) => Ok(default),
    }
}

impl RunConfig {
    /// Merge file < `HGN_SEED` < flags and validate the result.
    pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
        let cf: ConfigFile = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Load(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Load(format!("{}: {e}", p.display())))?
            }
            None => ConfigFile::default(),
        };

        let model = ov.model.or(cf.model).unwrap_or(ModelKind::Hybrid);
        let model_config = cf.model_config.unwrap_or_else(HybridGNetConfig::desk);
        let uses_igsc = matches!(model, ModelKind::Hybrid | ModelKind::Hybrid1Igsc)
            && !model_config.igsc_levels.is_empty();
        let mut train_config = cf
            .train_config
            .unwrap_or_else(|| TrainConfig::desk(uses_igsc));
        train_config.seed = resolve_seed(ov.seed, train_config.seed)?;
        if let Some(epochs) = ov.epochs {
            train_config.epochs = epochs;
        }

        let cfg = RunConfig {
            model,
            model_config,
            train_config,
            dataset: ov
                .dataset
                .clone()
                .or(cf.dataset)
                .ok_or_else(|| Error::invalid("a dataset manifest is required (--dataset or config file)"))?,
            mask_input: ov.mask_input || cf.mask_input.unwrap_or(false),
            pca_components: ov.pca_components.or(cf.pca_components),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config.validate()?;
        self.train_config.validate()?;
        if self.model == ModelKind::Pca && self.pca_components.is_none() {
            return Err(Error::invalid("--model pca requires --pca-components"));
        }
        Ok(())
    }
}
