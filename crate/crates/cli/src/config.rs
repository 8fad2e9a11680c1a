//! Resolved run configuration: file, then `--set` overrides, then flags.

use std::path::{Path, PathBuf};

use avloc::data::{Subset, SyntheticSpec};
use avloc::eval::DEFAULT_THRESHOLDS;
use avloc::inference::DecodeConfig;
use avloc::model::ModelConfig;
use avloc::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Input and output locations. Relative paths are resolved against the
/// working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Annotation JSON.
    pub annotations: PathBuf,
    /// Root of the `audio/` and `visual/` feature directories.
    pub features: PathBuf,
    /// Checkpoint read by `infer`; defaults to `<out>/checkpoint.davt`.
    pub checkpoint: Option<PathBuf>,
    /// Predictions read by `eval`; defaults to `<out>/predictions.json`.
    pub predictions: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            annotations: PathBuf::from("data/annotations.json"),
            features: PathBuf::from("data"),
            checkpoint: None,
            predictions: None,
        }
    }
}

/// Subset proportions for `split`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub seed: u64,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { seed: 2023, train: 0.7, val: 0.15, test: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Subset predicted by `infer` and scored by `eval`.
    pub subset: Subset,
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { subset: Subset::Test, thresholds: DEFAULT_THRESHOLDS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    /// Maximum gap for consecutive co-occurrence, in seconds.
    pub gap_s: f64,
    /// Width of a duration histogram bin, in seconds.
    pub bin_s: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { gap_s: avloc::data::DEFAULT_GAP_S, bin_s: 1.0 }
    }
}

/// Everything a command may read. Every section is optional in the file;
/// omitted fields keep their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub synthetic: SyntheticSpec,
    pub split: SplitConfig,
    pub eval: EvalConfig,
    pub stats: StatsConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Loads `file` (or the defaults) and applies `key=value` overrides.
    /// Values parse as JSON, falling back to a plain string.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut root = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            merge(&mut root, user, "")?;
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{item}`")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
            set_path(&mut root, key, value)?;
        }
        serde_json::from_value(root).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Overlays `user` on `base`, rejecting keys the defaults do not have.
fn merge(base: &mut Value, user: Value, at: &str) -> Result<(), CliError> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let field = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &field)?,
                    None => return Err(CliError::Usage(format!("unknown config field `{field}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let unknown = || CliError::Usage(format!("unknown config field `{key}`"));
    let mut slot = root;
    for part in key.split('.') {
        slot = slot.as_object_mut().and_then(|m| m.get_mut(part)).ok_or_else(unknown)?;
    }
    *slot = value;
    Ok(())
}
