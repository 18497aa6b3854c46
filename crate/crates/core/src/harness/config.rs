//! Experiment configuration: a TOML document validated against a fixed
//! schema. Unknown keys are rejected and errors name the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::builder::{Family, Method, NetworkSpec};
use crate::error::{ReplError, Result};
use crate::replacement::Variant;
use crate::trainer::{Optimizer, Schedule, TrainConfig};

use super::dataset::DataConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Defaults to SGD for CNNs and AdamW for ViTs.
    #[serde(default)]
    pub optimizer: Option<Optimizer>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default)]
    pub timing: bool,
    /// Stop a cell once train accuracy reaches this value.
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
}

fn default_epochs() -> usize {
    10
}

fn default_batch() -> usize {
    32
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch(),
            optimizer: None,
            schedule: Schedule::default(),
            clip: None,
            timing: false,
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainSection {
    pub fn resolve(&self, family: Family) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer.unwrap_or_else(|| Optimizer::default_for(family)),
            schedule: self.schedule,
            clip: self.clip,
            timing: self.timing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Compute the error decomposition and coefficient fits for repl cells.
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Test samples used for the error decomposition.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn yes() -> bool {
    true
}

fn default_samples() -> usize {
    64
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            enabled: true,
            samples: default_samples(),
        }
    }
}

/// A named coefficient/synthesis variant for repl cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedVariant {
    pub name: String,
    #[serde(flatten)]
    pub variant: Variant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: NetworkSpec,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Methods to run; defaults to `model.method` alone.
    #[serde(default)]
    pub methods: Vec<Method>,
    /// Replacement intervals to sweep; defaults to `model.k` alone.
    #[serde(default)]
    pub k_sweep: Vec<usize>,
    /// Repl variants to compare; defaults to `model.variant`.
    #[serde(default)]
    pub variants: Vec<NamedVariant>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    /// Epochs between checkpoints.
    #[serde(default = "one")]
    pub checkpoint_every: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn cfg_err(key: impl Into<String>, detail: impl Into<String>) -> ReplError {
    ReplError::Config {
        key: key.into(),
        detail: detail.into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            ReplError::Config { key, detail } => cfg_err(format!("model.{key}"), detail),
            other => other,
        })?;
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds", "at least one seed is required"));
        }
        if let Some(k) = self.k_sweep.iter().find(|&&k| k < 2) {
            return Err(cfg_err("k_sweep", format!("replacement interval must be at least 2, got {k}")));
        }
        for (i, v) in self.variants.iter().enumerate() {
            v.variant.validate().map_err(|e| cfg_err(format!("variants[{i}]"), e.to_string()))?;
        }
        if self.checkpoint_every == 0 {
            return Err(cfg_err("checkpoint_every", "must be at least 1"));
        }
        self.train.resolve(self.model.family).validate().map_err(|e| match e {
            ReplError::Config { key, detail } => {
                let key = key.strip_prefix("train.").unwrap_or(&key).to_string();
                cfg_err(format!("train.{key}"), detail)
            }
            other => other,
        })?;
        if let Some(a) = self.train.stop_at_train_accuracy.filter(|a| !(0.0..=1.0).contains(a)) {
            return Err(cfg_err("train.stop_at_train_accuracy", format!("must be in [0, 1], got {a}")));
        }
        let (shape, classes) = self.data.shape_and_classes();
        if let Some(shape) = shape.filter(|s| *s != self.model.input) {
            return Err(cfg_err(
                "model.input",
                format!("{:?} does not match the dataset shape {shape:?}", self.model.input),
            ));
        }
        if classes != self.model.classes {
            return Err(cfg_err(
                "model.classes",
                format!("{} does not match the dataset's {classes} classes", self.model.classes),
            ));
        }
        Ok(())
    }

    pub fn methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            vec![self.model.method]
        } else {
            self.methods.clone()
        }
    }

    pub fn ks(&self) -> Vec<usize> {
        if self.k_sweep.is_empty() {
            vec![self.model.k]
        } else {
            self.k_sweep.clone()
        }
    }

    pub fn variants(&self) -> Vec<NamedVariant> {
        if self.variants.is_empty() {
            vec![NamedVariant {
                name: "default".into(),
                variant: self.model.variant,
            }]
        } else {
            self.variants.clone()
        }
    }
}

/// Parses `value` as a TOML scalar or array, falling back to a bare string.
fn parse_override(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Sets `dotted.key = value` in a TOML tree, creating tables on the way.
pub fn apply_override(root: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(key, "malformed override key"));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| cfg_err(key, format!("`{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_override(value));
    Ok(())
}

/// Parses and validates a config document with `overrides` (dotted keys)
/// applied on top of the file's values.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| cfg_err("<document>", e.message().to_string()))?;
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        // some formats report unknown fields at their parent
        let key = match msg.split('`').nth(1).filter(|_| msg.starts_with("unknown field")) {
            Some(field) if path == "." => field.to_string(),
            Some(field) if !path.ends_with(field) => format!("{path}.{field}"),
            _ => path,
        };
        cfg_err(key, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| cfg_err("config", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}
