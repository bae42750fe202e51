//! JSON run configuration with `key.path=value` overrides.

use std::path::{Path, PathBuf};

use acl_core::backbone::{BackboneConfig, PretrainConfig};
use acl_core::engine::{RoundConfig, Toggles, TrainConfig};
use acl_core::split::TaskSplit;
use acl_core::synthetic::SyntheticSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic { spec: SyntheticSpec, seed: u64 },
    /// `ACLD` files; relative paths resolve against the config file's directory.
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub label: String,
    pub toggles: Toggles,
}

fn default_ablation() -> Vec<AblationCell> {
    Toggles::ablation_ladder()
        .into_iter()
        .map(|(label, toggles)| AblationCell {
            label: label.to_string(),
            toggles,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: TaskSplit,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub round: RoundConfig,
    pub memory_budget: usize,
    /// Training schedule of the naive and joint baselines; defaults to the
    /// adapter-training schedule.
    #[serde(default)]
    pub baseline: Option<TrainConfig>,
    #[serde(default = "default_ablation")]
    pub ablation: Vec<AblationCell>,
}

impl RunConfig {
    pub fn baseline_training(&self) -> &TrainConfig {
        self.baseline.as_ref().unwrap_or(&self.round.adapter_training)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: acl_core::Error| CliError::Config(e.to_string());
        self.split.validate().map_err(wrap)?;
        self.backbone.stage_shapes().map_err(wrap)?;
        self.round.validate(self.backbone.num_stages() - 1).map_err(wrap)?;
        if let Some(b) = &self.baseline {
            b.validate("baseline").map_err(wrap)?;
        }
        if self.memory_budget == 0 {
            return Err(CliError::Config("memory_budget: must be positive".into()));
        }
        if let DataConfig::Synthetic { spec, .. } = &self.data {
            spec.validate().map_err(wrap)?;
            if spec.output_shape() != self.backbone.input_shape() {
                return Err(CliError::Config(format!(
                    "data.synthetic.spec: images are {:?} but backbone expects {:?}",
                    spec.output_shape(),
                    self.backbone.input_shape()
                )));
            }
            if let Some(c) = self.split.classes_through(self.split.rounds.len()).iter().chain(&self.split.base_classes).find(|c| c.0 as usize >= spec.num_classes) {
                return Err(CliError::Config(format!("split: class {c} is not generated (num_classes = {})", spec.num_classes)));
            }
        }
        let mut labels: Vec<&str> = self.ablation.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("ablation: labels must be unique".into()));
        }
        Ok(())
    }
}

/// Parses `text`, applies `overrides` (each `dotted.key=value`, the value read as
/// JSON and otherwise as a string) and validates. Errors name the offending key.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let config: RunConfig = if overrides.is_empty() {
        let mut de = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let inner = e.inner();
            CliError::Config(format!("at `{}` (line {}, column {}): {inner}", e.path(), inner.line(), inner.column()))
        })?
    } else {
        let mut value: Value = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_path_to_error::deserialize(value).map_err(|e| CliError::Config(format!("at `{}`: {}", e.path(), e.inner())))?
    };
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut config = parse_config(&text, overrides).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if let DataConfig::Files { train, test } = &mut config.data {
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [train, test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(config)
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert((*part).to_string(), value);
                    return Ok(());
                }
                map.entry(*part).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::Config(format!("override `{key}`: `{part}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Config(format!("override `{key}`: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("override `{key}`: `{part}` is inside a non-object value"))),
        };
    }
    Err(CliError::Config(format!("override `{assignment}` has an empty key")))
}
