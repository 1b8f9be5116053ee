use std::path::{Path, PathBuf};

use manf_core::data::CorruptionSpec;
use manf_core::training::{EvalConfig, TrainConfig};
use manf_core::ManfConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const VERSION: u32 = 1;

/// Everything a `train` or `sweep` run needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Series CSV.
    pub data: PathBuf,
    /// Receives `checkpoint/`, `history.csv` and `config.json`.
    pub output: PathBuf,
    #[serde(default)]
    pub model: ManfConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub corruption: CorruptionSpec,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Failure::usage(format!("config error at `{path}`: {}", e.inner()))
        })?;
        if cfg.version != VERSION {
            return Err(Failure::usage(format!(
                "config error at `version`: expected {VERSION}, found {}",
                cfg.version
            )));
        }
        cfg.model.validate().map_err(|e| Failure::usage(format!("config error at `model`: {e}")))?;
        cfg.train.validate().map_err(|e| Failure::usage(format!("config error at `train`: {e}")))?;
        cfg.corruption
            .validate()
            .map_err(|e| Failure::usage(format!("config error at `corruption`: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
