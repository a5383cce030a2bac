//! Experiment configuration files: TOML with dotted-path overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::preset::{DeskScale, MethodPreset, RunShape};
use crate::augment::StrategyName;
use crate::data::{DatasetSource, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::method::Method;
use crate::pretrain::TrainConfig;

/// Prefix of the config lines echoed at the top of results files.
pub const ECHO_PREFIX: &str = "# ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pretrain: DatasetSource,
    pub probe_train: DatasetSource,
    pub probe_test: DatasetSource,
}

impl DataConfig {
    /// Synthetic shapes: 8192 pretraining images, 2048 + 2048 labeled probe images.
    pub fn synthetic(seed: u64, classes: usize, size: usize) -> Self {
        let spec = |count, split| DatasetSource::Synthetic(SyntheticSpec { seed, classes, count, size, split });
        DataConfig {
            pretrain: spec(8192, Split::Pretrain),
            probe_train: spec(2048, Split::ProbeTrain),
            probe_test: spec(2048, Split::ProbeTest),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::synthetic(7, 4, DeskScale::default().image_size)
    }
}

fn default_threshold() -> f64 {
    1e-3
}

fn default_collapse_sample() -> usize {
    512
}

/// One cell of a results table: a preset, its ablation flags and a seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Method,
    pub seeds: Vec<u64>,
    pub epochs: u64,
    pub batch_size: usize,
    pub out: PathBuf,
    /// Augmentation strategy; the preset's own when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<StrategyName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<bool>,
    /// Embeddings with mean per-dimension std below this count as collapsed.
    #[serde(default = "default_threshold")]
    pub collapse_threshold: f64,
    /// Probe-test images used for the collapse metrics.
    #[serde(default = "default_collapse_sample")]
    pub collapse_sample: usize,
    #[serde(default)]
    pub desk: DeskScale,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn new(preset: Method, seeds: Vec<u64>, epochs: u64, batch_size: usize, out: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            preset,
            seeds,
            epochs,
            batch_size,
            out: out.into(),
            augmentation: None,
            predictor: None,
            momentum: None,
            collapse_threshold: default_threshold(),
            collapse_sample: default_collapse_sample(),
            desk: DeskScale::default(),
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config(format!("seeds must be distinct, got {:?}", self.seeds)));
        }
        if self.collapse_sample < 2 {
            return Err(Error::config("collapse_sample must be at least 2"));
        }
        self.probe.validate()?;
        self.train_config(self.seeds[0]).map(|_| ())
    }

    pub fn method_preset(&self) -> MethodPreset {
        MethodPreset::of(self.preset)
    }

    pub fn strategy(&self) -> StrategyName {
        self.augmentation.unwrap_or(self.method_preset().strategy)
    }

    pub fn predictor_enabled(&self) -> bool {
        self.predictor.unwrap_or(self.method_preset().predictor)
    }

    pub fn momentum_enabled(&self) -> bool {
        self.momentum.unwrap_or(self.method_preset().momentum.is_some())
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let shape = RunShape {
            strategy: self.augmentation,
            predictor: self.predictor,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        };
        self.method_preset().train_config(&shape, &self.desk)
    }

    /// Parse TOML text, then apply `key.path=value` overrides in order.
    /// Overrides patch the defaults-filled config when the text parses on its
    /// own, so a single nested field can change without restating its table.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::config(format!("config: {e}")))?;
        if !overrides.is_empty() {
            if let Ok(filled) = toml::Value::Table(table.clone()).try_into::<ExperimentConfig>() {
                table = toml::Table::try_from(&filled).map_err(|e| Error::config(format!("config: {e}")))?;
            }
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// The resolved config as comment lines for the head of a results file.
    pub fn echo(&self) -> Result<String> {
        Ok(self.to_toml()?.lines().map(|l| format!("{ECHO_PREFIX}{l}\n")).collect())
    }

    /// Recover a config from the leading comment block of a results file.
    pub fn from_echo(text: &str) -> Result<Self> {
        let body: String = text
            .lines()
            .map_while(|l| l.strip_prefix(ECHO_PREFIX).or_else(|| (l == ECHO_PREFIX.trim_end()).then_some("")))
            .map(|l| format!("{l}\n"))
            .collect();
        Self::parse(&body, &[])
    }
}

/// Set `a.b.c = value` in a TOML table. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override key `{path}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cursor = table;
    for key in parents {
        let entry = cursor.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{path}`: `{key}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
