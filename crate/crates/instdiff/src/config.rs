//! Run configuration: one TOML file covering every module default.

use std::path::Path;

use instdiff_core::model::{ScheduleConfig, TrainConfig, UNetConfig};
use instdiff_core::sampler::SampleOptions;
use instdiff_shapeworld::SceneConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub shard_size: usize,
    pub scene: SceneConfig,
    /// Held-out layouts have no occlusion so the detector is exact on them.
    pub test_scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_count: 20_000,
            test_count: 500,
            shard_size: 1000,
            scene: SceneConfig::default(),
            test_scene: SceneConfig::disjoint(),
        }
    }
}

/// Quantitative gates for a trained model on the held-out layouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Gates {
    pub pim_point: f64,
    pub mask_iou: f64,
    pub box_recall50: f64,
    pub acc_color: f64,
    /// Required ratio over the untrained baseline where chance applies.
    pub baseline_factor: f64,
}

impl Default for Gates {
    fn default() -> Self {
        Self {
            pim_point: 0.75,
            mask_iou: 0.50,
            box_recall50: 0.60,
            acc_color: 0.60,
            baseline_factor: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out layouts to score; 0 means all.
    pub layouts: usize,
    /// Per-layout generation seeds are `seed + index`.
    pub seed: u64,
    pub gates: Gates,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            layouts: 500,
            seed: 1234,
            gates: Gates::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleOptions,
    pub eval: EvalConfig,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sample: SampleOptions::default(),
            eval: EvalConfig::default(),
            checkpoint_every: 1000,
            log_every: 50,
        }
    }
}

/// A parsed config plus the hash of the text it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Applies `a.b.c=value` overrides. Values parse as TOML and fall back to
/// plain strings.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut *doc;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<LoadedConfig> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        apply_overrides(&mut doc, overrides)?;
        let canonical = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        let config: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(LoadedConfig {
            hash: sha256_hex(canonical.as_bytes()),
            config,
        })
    }

    /// Reads `path`, or the defaults when `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.dataset.scene.validate()?;
        self.dataset.test_scene.validate()?;
        if self.dataset.shard_size == 0 {
            return Err(Error::Config("dataset.shard_size must be positive".into()));
        }
        if self.dataset.scene.image_size != self.model.image_size
            || self.dataset.test_scene.image_size != self.model.image_size
        {
            return Err(Error::Config("dataset and model image sizes differ".into()));
        }
        Ok(())
    }
}
