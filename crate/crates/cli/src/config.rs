//! Experiment configuration: JSON file, dotted-path overrides, validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use offense_core::classifier::{HeadInit, TrainConfig};
use offense_core::encoder::EncoderConfig;
use offense_core::transfer::Strategy;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run name; also the model label in reports.
    pub name: String,
    /// Seeds encoder and head initialization and replaces `train.seed`.
    #[serde(default)]
    pub seed: u64,
    /// Where the run directory goes. Defaults to `$OFFENSE_OUTPUT_ROOT/<name>-<command>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderChoice,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<DataRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<DataRef>,
    #[serde(default)]
    pub lowercase: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRef {
    pub path: PathBuf,
    pub profile: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    Mini(EncoderConfig),
    /// Name of an external pretrained encoder. Accepted by the schema so
    /// configs can be shared, but no adapter ships with this tool.
    Pretrained(String),
}

impl Default for EncoderChoice {
    fn default() -> Self {
        EncoderChoice::Mini(EncoderConfig::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default)]
    pub init: HeadInit,
    #[serde(default = "yes")]
    pub bias: bool,
}

fn yes() -> bool {
    true
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            init: HeadInit::default(),
            bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub source_checkpoint: PathBuf,
    pub strategy: Strategy,
    /// Source class name to target class name, for `full` only. Without it
    /// classes correspond by position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_mapping: Option<BTreeMap<String, String>>,
}

/// Sets `path` (dot separated) in `root` to `raw`, parsed as JSON when it
/// parses and taken as a string otherwise. Missing objects are created.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override path `{path}`")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            let parent = keys[..i].join(".");
            return Err(CliError::Config(format!("`{parent}` is not an object; cannot set `{path}`")));
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

/// Splits `a.b.c=value` at the first `=`.
pub fn parse_override(spec: &str) -> Result<(String, String), CliError> {
    spec.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form path=value")))
}

impl ExperimentConfig {
    /// Reads the file, applies overrides and resolves relative paths
    /// against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for spec in overrides {
            let (key, raw) = parse_override(spec)?;
            apply_override(&mut value, &key, &raw)?;
        }
        let mut config: Self = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.train.seed = config.seed;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for data in [&mut self.data.train, &mut self.data.eval].into_iter().flatten() {
            fix(&mut data.path);
        }
        if let Some(t) = &mut self.transfer {
            fix(&mut t.source_checkpoint);
        }
        if let Some(dir) = &mut self.output_dir {
            fix(dir);
        }
    }

    /// Checks that everything a run reads exists and that the encoder and
    /// training settings are usable.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.trim().is_empty() {
            return Err(CliError::Config("`name` must not be empty".into()));
        }
        match &self.encoder {
            EncoderChoice::Mini(cfg) => cfg.validate().map_err(|e| CliError::Config(format!("encoder: {e}")))?,
            EncoderChoice::Pretrained(reference) => {
                return Err(CliError::Config(format!(
                    "pretrained encoder `{reference}` is not available: no adapter is bundled; \
                     implement `SequenceEncoder` for it or use a `mini` encoder"
                )))
            }
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        let registry = offense_core::corpus::ProfileRegistry::builtin();
        for (field, data) in [("data.train", &self.data.train), ("data.eval", &self.data.eval)] {
            if let Some(d) = data {
                registry
                    .get(&d.profile)
                    .map_err(|e| CliError::Config(format!("{field}.profile: {e}")))?;
                require_file(field, &d.path)?;
            }
        }
        if let Some(t) = &self.transfer {
            require_file("transfer.source_checkpoint", &t.source_checkpoint)?;
            if t.label_mapping.is_some() && t.strategy == Strategy::EncoderOnly {
                return Err(CliError::Config(
                    "transfer.label_mapping applies to the full strategy only".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn mini_encoder(&self) -> &EncoderConfig {
        match &self.encoder {
            EncoderChoice::Mini(cfg) => cfg,
            EncoderChoice::Pretrained(_) => unreachable!("rejected by validate"),
        }
    }

    pub fn train_data(&self) -> Result<&DataRef, CliError> {
        self.data
            .train
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs `data.train`".into()))
    }

    pub fn eval_data(&self) -> Result<&DataRef, CliError> {
        self.data
            .eval
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs `data.eval`".into()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn require_file(field: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{field}: {} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_set_nested_leaves() {
        let mut v = json!({"train": {"epochs": 3}, "name": "a"});
        apply_override(&mut v, "train.epochs", "5").unwrap();
        apply_override(&mut v, "train.optimizer", "sgd").unwrap();
        apply_override(&mut v, "encoder.mini.hidden_size", "8").unwrap();
        assert_eq!(v["train"]["epochs"], json!(5));
        assert_eq!(v["train"]["optimizer"], json!("sgd"));
        assert_eq!(v["encoder"]["mini"]["hidden_size"], json!(8));
        assert!(apply_override(&mut v, "name.inner", "1").is_err());
        assert!(apply_override(&mut v, "a..b", "1").is_err());
    }

    #[test]
    fn override_syntax() {
        assert_eq!(parse_override("a.b=x=y").unwrap(), ("a.b".into(), "x=y".into()));
        assert!(parse_override("nothing").is_err());
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c: ExperimentConfig = serde_json::from_value(json!({
            "name": "x",
            "data": {"train": {"path": "t.tsv", "profile": "olid-en"}}
        }))
        .unwrap();
        assert_eq!(c.encoder, EncoderChoice::Mini(EncoderConfig::default()));
        assert_eq!(c.train, TrainConfig::default());
        assert!(c.head.bias);
        let back: ExperimentConfig = serde_json::from_str(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: Result<ExperimentConfig, _> = serde_json::from_value(json!({
            "name": "x", "data": {}, "trian": {}
        }));
        assert!(r.is_err());
    }

    #[test]
    fn bundled_configs_parse() {
        for text in [
            include_str!("../configs/english.json"),
            include_str!("../configs/bengali-encoder-only.json"),
            include_str!("../configs/hindi-full.json"),
        ] {
            let c: ExperimentConfig = serde_json::from_str(text).unwrap();
            assert!(c.data.train.is_some() && c.data.eval.is_some());
        }
    }

    #[test]
    fn schema_is_valid_json() {
        let v: Value = serde_json::from_str(SCHEMA).unwrap();
        assert_eq!(v["type"], "object");
    }
}
