//! Experiment configuration: one TOML document with a section per stage.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! `--set section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::dataio::GeneratorConfig;
use crate::error::{Error, Result};
use crate::fringe::FringeConfig;
use crate::fusion::{FusionConfig, FusionVariant};
use crate::head::HeadConfig;
use crate::model::ModelConfig;
use crate::network::NetworkConfig;
use crate::qfm::QfmConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            val_frac: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub windows: Vec<usize>,
    pub variants: Vec<FusionVariant>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            windows: vec![8, 16, 32, 64, 128],
            variants: FusionVariant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub fringe: FringeConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub qfm: QfmConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            model: self.model.clone(),
            fusion: self.fusion.clone(),
            qfm: self.qfm.clone(),
            head: self.head.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.network().validate(self.train.window_len)?;
        if self.fringe.min_points < 3 {
            return Err(Error::Config("fringe: min_points must be at least 3".into()));
        }
        if self.sweep.windows.is_empty() || self.sweep.variants.is_empty() {
            return Err(Error::Config("sweep: windows and variants must be non-empty".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) and applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Applies one `section.key=value` override. The value is parsed as a TOML
/// value and falls back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = parse_value(raw.trim());
    let mut cur = doc;
    for part in &path[..path.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| Value::String(raw.to_string()))
}
