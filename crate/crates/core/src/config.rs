//! The run configuration: one JSON document covering the model, losses,
//! augmentation, both optimisation phases, default paths and the seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::BundleConfig;
use crate::training::{AffineAugmentSpec, Objective, OptimConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Fallback paths used when the corresponding command-line flag is absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoPaths {
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Seeds network initialisation and both optimisation phases; the
    /// per-section seed fields are overwritten with this value.
    pub seed: u64,
    pub model: BundleConfig,
    pub objective: Objective,
    pub augment: AffineAugmentSpec,
    pub pretrain: OptimConfig,
    pub train: OptimConfig,
    pub paths: IoPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: BundleConfig::default(),
            objective: Objective::default(),
            augment: AffineAugmentSpec::default(),
            pretrain: OptimConfig::default(),
            train: OptimConfig::default(),
            paths: IoPaths::default(),
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::Config(m),
        other => other,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate().map_err(config_err)?;
        self.objective.validate().map_err(config_err)?;
        self.augment.validate().map_err(config_err)?;
        self.pretrain.validate().map_err(|e| Error::Config(format!("pretrain: {}", config_err(e))))?;
        self.train.validate().map_err(|e| Error::Config(format!("train: {}", config_err(e))))?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn bundle_config(&self) -> BundleConfig {
        BundleConfig { seed: self.seed, ..self.model }
    }

    pub fn pretrain_opt(&self) -> OptimConfig {
        OptimConfig { seed: self.seed, ..self.pretrain }
    }

    pub fn train_opt(&self) -> OptimConfig {
        OptimConfig { seed: self.seed, ..self.train }
    }
}
