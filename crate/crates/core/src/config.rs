//! TOML run configuration.
//!
//! ```toml
//! preset = "its"          # optional: its | ots | dense | nh
//!
//! [model]
//! base_channels = 32
//! ablation = "hafm-s"
//!
//! [train]
//! steps = 500             # overrides the preset's epoch count
//! ```
//!
//! Keys under `[train]` override the preset. Unknown keys anywhere are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    preset: Option<String>,
    #[serde(default)]
    model: Option<toml::Table>,
    #[serde(default)]
    train: Option<toml::Table>,
}

fn toml_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawRunConfig = toml::from_str(text).map_err(toml_err)?;
        let model: ModelConfig = toml::Value::Table(raw.model.unwrap_or_default())
            .try_into()
            .map_err(toml_err)?;
        let base = match &raw.preset {
            Some(p) => TrainConfig::preset(p)?,
            None => TrainConfig::default(),
        };
        let mut merged = toml::Value::try_from(&base).map_err(toml_err)?;
        let table = merged.as_table_mut().expect("struct serializes to a table");
        for (k, v) in raw.train.unwrap_or_default() {
            if !matches!(table.get(&k), Some(toml::Value::Table(_))) || !v.is_table() {
                table.insert(k, v);
                continue;
            }
            let inner = table.get_mut(&k).and_then(|t| t.as_table_mut()).expect("checked");
            for (ik, iv) in v.as_table().expect("checked") {
                inner.insert(ik.clone(), iv.clone());
            }
        }
        let train: TrainConfig = merged.try_into().map_err(toml_err)?;
        model.validate()?;
        train.validate()?;
        Ok(RunConfig { model, train })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(toml_err)
    }
}
