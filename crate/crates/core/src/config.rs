//! Run configuration: one JSON document with `arch`, `train`, `data` and
//! `eval` sections mirroring the module configs. Unknown keys are rejected
//! and the whole document validates before any work starts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::EvalProtocol;
use crate::models::ArchConfig;
use crate::scene::DensityConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_n_train_scenes() -> usize {
    20
}

/// Dataset-handling settings: how many scenes go to the train split and how
/// ground-truth density maps are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train_scenes: usize,
    pub split_seed: u64,
    pub density: DensityConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train_scenes: default_n_train_scenes(),
            split_seed: 0,
            density: DensityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalProtocol,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.arch
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.data
            .density
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.eval
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.data.n_train_scenes == 0 {
            return Err(ConfigError::Invalid(
                "data.n_train_scenes must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Short stable hash of any serializable config (sha256 of its compact JSON).
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut s = String::with_capacity(16);
    for b in &digest[..8] {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
