//! Run configuration: JSON file, `--set key.path=value` overrides and the
//! dedicated flags, merged in that order over the built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use reid_core::data::SynthConfig;
use reid_core::diagnostics::DiagnoseConfig;
use reid_core::eval::{DistMetric, QeConfig, RerankConfig};
use reid_core::training::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Manifest CSV to load; when absent the synthetic generator runs in memory.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub metric: DistMetric,
    pub max_rank: usize,
    pub use_rerank: bool,
    pub use_qe: bool,
    /// Use the train split as both query and gallery, with each item
    /// relevant only to itself and camera filtering off.
    pub self_match: bool,
    pub rerank: RerankConfig,
    pub qe: QeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: DistMetric::Cosine,
            max_rank: 10,
            use_rerank: false,
            use_qe: false,
            self_match: false,
            rerank: RerankConfig::default(),
            qe: QeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub diagnose: DiagnoseConfig,
}

/// Recursively overlays `top` onto `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `key.path=value`; the value is JSON when it parses as JSON and a
/// bare string otherwise.
fn apply_override(root: &mut Value, entry: &str) -> Result<(), CliError> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {entry:?} is not of the form key.path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *root;
    for key in path.split('.') {
        slot = match slot {
            Value::Object(map) => map
                .get_mut(key)
                .ok_or_else(|| CliError::Config(format!("unknown config key {path:?}")))?,
            Value::Array(items) => {
                let i: usize = key
                    .parse()
                    .map_err(|_| CliError::Config(format!("{path:?}: {key:?} is not an array index")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| CliError::Config(format!("{path:?}: index {i} out of range ({len})")))?
            }
            _ => return Err(CliError::Config(format!("{path:?}: {key:?} is not inside an object"))),
        };
    }
    *slot = value;
    Ok(())
}

/// Reads a config file. A run manifest is accepted too, in which case its
/// recorded config is used.
pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if v.get("command").is_some() {
        if let Some(cfg) = v.get_mut("config") {
            return Ok(cfg.take());
        }
    }
    Ok(v)
}

pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
    let mut root = serde_json::to_value(Config::default()).expect("default config serializes");
    if let Some(path) = file {
        merge(&mut root, read_config_file(path)?);
    }
    for entry in overrides {
        apply_override(&mut root, entry)?;
    }
    serde_json::from_value(root).map_err(|e| CliError::Config(format!("invalid config: {e}")))
}
