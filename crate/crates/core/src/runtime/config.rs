//! Run configuration: one flat TOML document holding the training settings
//! plus the data source keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CganError, Result};
use crate::fsio;
use crate::runtime::data::{DataSource, DatasetSpec};
use crate::runtime::synthetic::SyntheticRecipe;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Image directory; synthetic scenes are used when absent.
    pub data_dir: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_layers: usize,
    pub synthetic_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            data_dir: None,
            synthetic_count: 2000,
            synthetic_layers: 2,
            synthetic_seed: 0,
            shuffle_seed: 0,
        }
    }
}

impl DataConfig {
    pub const KEYS: &[&str] = &[
        "data_dir",
        "synthetic_count",
        "synthetic_layers",
        "synthetic_seed",
        "shuffle_seed",
    ];
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn config_error(e: impl std::fmt::Display) -> CganError {
    CganError::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(config_error)?;
        let mut data = toml::Table::new();
        for key in DataConfig::KEYS {
            if let Some(v) = table.remove(*key) {
                data.insert(key.to_string(), v);
            }
        }
        let train: TrainConfig = table.try_into().map_err(config_error)?;
        let data: DataConfig = data.try_into().map_err(config_error)?;
        let cfg = RunConfig { train, data };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(&self.train).expect("config serializes");
        let data = toml::Table::try_from(&self.data).expect("config serializes");
        table.extend(data);
        toml::to_string(&table).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsio::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CganError::Parse {
            path: path.to_path_buf(),
            message: "not UTF-8".into(),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            CganError::Config(message) => CganError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.data_dir.is_none() {
            self.recipe().validate()?;
            if self.data.synthetic_count == 0 {
                return Err(CganError::Config("synthetic_count must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn recipe(&self) -> SyntheticRecipe {
        SyntheticRecipe {
            layers: self.data.synthetic_layers,
            size: self.train.image_size,
            seed: self.data.synthetic_seed,
            ..SyntheticRecipe::default()
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let source = match &self.data.data_dir {
            Some(dir) => DataSource::Directory(dir.clone()),
            None => DataSource::Synthetic {
                recipe: self.recipe(),
                count: self.data.synthetic_count,
            },
        };
        DatasetSpec {
            source,
            resolution: self.train.image_size,
            shuffle_seed: self.data.shuffle_seed,
        }
    }
}
