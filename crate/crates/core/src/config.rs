//! TOML run configuration with `section.key=value` overrides.
//!
//! ```toml
//! [model]
//! d_model = 64
//! [train]
//! steps = 2000
//! [codec]
//! default_tempo = 120.0
//! [sampler]
//! top_k = [32, 32, 0, 0]
//! ```
//!
//! Missing keys take the desk-scale defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::codec::CodecConfig;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("unknown config key `{key}`; valid keys: {}", valid.join(", "))]
    UnknownKey { key: String, valid: Vec<String> },
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

impl Default for Config {
    /// Desk-scale model; the full-size one is `ModelConfig::default()`.
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            codec: CodecConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

fn as_table(c: &Config) -> Table {
    Table::try_from(c).expect("config serializes to a table")
}

/// Dotted names of every settable key.
pub fn valid_keys() -> Vec<String> {
    let mut out = Vec::new();
    for (section, v) in as_table(&Config::default()) {
        if let Value::Table(t) = v {
            out.extend(t.keys().map(|k| format!("{section}.{k}")));
        }
    }
    out
}

fn check_keys(table: &Table) -> Result<(), ConfigError> {
    let valid = valid_keys();
    let unknown = |key: String| ConfigError::UnknownKey {
        key,
        valid: valid.clone(),
    };
    for (section, v) in table {
        match v {
            Value::Table(t) => {
                for k in t.keys() {
                    let key = format!("{section}.{k}");
                    if !valid.contains(&key) {
                        return Err(unknown(key));
                    }
                }
            }
            _ => return Err(unknown(section.clone())),
        }
    }
    Ok(())
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        check_keys(&table)?;
        let mut merged = as_table(&Config::default());
        for (section, v) in table {
            if let (Some(Value::Table(base)), Value::Table(t)) = (merged.get_mut(&section), v) {
                base.extend(t);
            }
        }
        Table::try_into(merged).map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value` settings. Values are TOML literals;
    /// anything that does not parse as one is taken as a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut table = as_table(self);
        let valid = valid_keys();
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.into()))?;
            let key = key.trim();
            if !valid.iter().any(|k| k == key) {
                return Err(ConfigError::UnknownKey {
                    key: key.into(),
                    valid,
                });
            }
            let value = format!("v = {}", raw.trim())
                .parse::<Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| Value::String(raw.trim().into()));
            let (section, field) = key.split_once('.').expect("valid keys are dotted");
            if let Some(Value::Table(t)) = table.get_mut(section) {
                t.insert(field.into(), value);
            }
        }
        Table::try_into(table).map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }
}
