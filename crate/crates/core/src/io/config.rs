//! TOML run configuration. Every section is optional; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::ba::BaConfig;
use crate::field::FieldConfig;
use crate::mask::MaskConfig;
use crate::render::TrainConfig;

/// Default locations used by the `pipeline` command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ba: BaConfig,
    pub mask: MaskConfig,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, IoError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(IoError::at(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let err = |e: String| IoError::Config(e);
        self.ba.validate().map_err(|e| err(e.to_string()))?;
        self.mask.validate().map_err(|e| err(e.to_string()))?;
        self.train.validate().map_err(|e| err(e.to_string()))?;
        let f = &self.field;
        if f.spatial_resolution < 2 || f.temporal_resolution < 2 || f.feature_dim == 0 || f.hidden_width == 0 || f.ranks.contains(&0) {
            return Err(err(format!("invalid field settings {f:?}")));
        }
        Ok(())
    }
}
