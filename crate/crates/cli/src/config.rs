//! Run configuration: defaults, then a JSON file, then `--set` overrides.

use std::path::Path;

use avw2_core::beamform::Weighting;
use avw2_core::data_synth::CorpusConfig;
use avw2_core::model::ModelConfig;
use avw2_core::trainer::{FinetuneConfig, PretrainConfig, ProbeConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamformConfig {
    /// Largest delay searched, in samples.
    pub max_lag: usize,
    pub weighting: Weighting,
}

impl Default for BeamformConfig {
    fn default() -> Self {
        BeamformConfig {
            max_lag: 64,
            weighting: Weighting::Uniform,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub beamform: BeamformConfig,
    pub probe: ProbeConfig,
    /// Record wall-clock milliseconds in metric files.
    pub timing: bool,
}

/// What a command was asked to do, stored next to its outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub command: String,
    pub inputs: Map<String, Value>,
    pub config: RunConfig,
}

/// A resolved configuration plus the dotted keys the user touched.
pub struct Resolved {
    pub config: RunConfig,
    pub touched: Vec<String>,
}

impl Resolved {
    pub fn touched(&self, prefix: &str) -> bool {
        self.touched.iter().any(|k| k == prefix || k.starts_with(&format!("{prefix}.")))
    }
}

fn merge(base: &mut Value, patch: &Value, path: &str, touched: &mut Vec<String>) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
                merge(slot, v, &key, touched)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            touched.push(path.to_string());
            Ok(())
        }
    }
}

fn set_dotted(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Resolved, CliError> {
    let mut root = serde_json::to_value(RunConfig::default()).expect("defaults serialise");
    let mut touched = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(CliError::Usage(format!("config file {} is not a JSON object", path.display())));
        }
        merge(&mut root, &patch, "", &mut touched)?;
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{s}` is not KEY=VALUE")))?;
        set_dotted(&mut root, key.trim(), raw.trim())?;
        touched.push(key.trim().to_string());
    }
    let config = serde_json::from_value(root).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    Ok(Resolved { config, touched })
}
