//! Run configuration: a JSON file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use videolstm::data::DatasetConfig;
use videolstm::experiment::CompareConfig;
use videolstm::localize::LocalizationConfig;
use videolstm::model::ModelConfig;
use videolstm::train::TrainConfig;
use videolstm::{Error, Result};

/// Fully resolved settings of one invocation; written next to its outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub localization: LocalizationConfig,
    pub compare: CompareConfig,
}

pub const RESOLVED_CONFIG_FILE: &str = "config.json";

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Usage("no dataset directory; pass --data or set it in the config file".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Usage("no output directory; pass --out or set it in the config file".into()))
    }

    /// Writes the resolved configuration into the output directory.
    pub fn echo(&self) -> Result<()> {
        let out = self.out_dir()?;
        fs::create_dir_all(out)?;
        fs::write(out.join(RESOLVED_CONFIG_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Replaces `slot` when an override is present.
pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Replaces an optional setting when an override is present.
pub fn set_some<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}
