//! TOML run configuration with dotted-path command-line overrides.
//!
//! Unknown keys are rejected everywhere, so a typo in a file or in a
//! `--set` override fails loudly instead of silently using a default.

use crate::data;
use crate::estimator::{EstimatorConfig, EstimatorTrainConfig};
use crate::trainer::TrainConfig;
use crate::{Error, Result};
use std::path::{Path, PathBuf};

/// Corpus location and split policy.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `raw/` and `reference/` subdirectories.
    pub root: PathBuf,
    /// Square side every image is resized to.
    pub side: usize,
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("corpus"),
            side: 256,
            val_fraction: 0.1,
            split_seed: 7,
        }
    }
}

/// The whole runnable configuration; every section has usable defaults.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub data: DataConfig,
    pub estimator: EstimatorConfig,
    pub estimator_train: EstimatorTrainConfig,
    pub train: TrainConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            estimator: EstimatorConfig {
                input_side: 256,
                ..EstimatorConfig::base()
            },
            estimator_train: EstimatorTrainConfig::default(),
            train: TrainConfig::base(),
        }
    }
}

impl AppConfig {
    /// Cross-section consistency on top of each section's own checks.
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        self.train.validate()?;
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val fraction {} outside (0,1)",
                self.data.val_fraction
            )));
        }
        if self.estimator.input_side != self.data.side {
            return Err(Error::Config(format!(
                "estimator side {} != data side {}",
                self.estimator.input_side, self.data.side
            )));
        }
        if self.train.image_side != self.data.side {
            return Err(Error::Config(format!(
                "training side {} != data side {}",
                self.train.image_side, self.data.side
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    /// Loads the split described by `[data]`.
    pub fn load_split(&self) -> Result<data::DatasetSplit> {
        let pairs = data::load_corpus(&self.data.root, self.data.side)?;
        data::split_corpus(pairs, self.data.val_fraction, self.data.split_seed)
    }
}

/// Parses an override's value with TOML scalar syntax; anything that does
/// not parse as a scalar is taken as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let snippet = format!("v = {raw}");
    if let Ok(table) = snippet.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// Applies one `a.b.c=value` override to the raw tree, creating intermediate
/// tables as needed.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let mut segments = path.split('.').collect::<Vec<_>>();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} is malformed")));
    }
    let last = segments.pop().unwrap();
    let mut table = root;
    for seg in segments {
        table = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override {path:?} descends into a non-table value"))
            })?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// `data.side` is the single source of truth for image resolution: sections
/// that did not pin their own side explicitly inherit it, so one override
/// rescales the whole pipeline coherently.
fn inherit_side(table: &mut toml::Table) {
    let Some(side) = table
        .get("data")
        .and_then(|d| d.get("side"))
        .cloned()
    else {
        return;
    };
    fn descend<'a>(mut node: &'a mut toml::Table, dirs: &[&str]) -> Option<&'a mut toml::Table> {
        for seg in dirs {
            node = node
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()?;
        }
        Some(node)
    }
    for path in [
        &["estimator", "input_side"][..],
        &["train", "image_side"][..],
        &["train", "denoiser", "input_side"][..],
    ] {
        let (last, dirs) = path.split_last().unwrap();
        if let Some(node) = descend(table, dirs) {
            node.entry(last.to_string()).or_insert_with(|| side.clone());
        }
    }
}

/// Reads the optional file, layers `KEY=VALUE` overrides on top, and
/// deserializes strictly.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<AppConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    inherit_side(&mut table);
    let cfg: AppConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
