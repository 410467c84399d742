//! Run configuration: every module's settings under flat dotted keys
//! (`model.channels`, `train.base_lr`, `memory.policy`, ...), read from a
//! TOML file and overridable key by key. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::memory::MemoryPolicy;
use crate::model::ModelConfig;
use crate::pipeline::{MergeMode, PipelineConfig};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub policy: MemoryPolicy,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub merge: MergeMode,
    pub debug_attention: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Boundary tolerance in pixels; unset means `ceil(0.8%)` of the diagonal.
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub memory: MemoryConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

/// Short names for nested keys.
const ALIASES: &[(&str, &str)] = &[
    ("model.channels", "model.backbone.projection_channels"),
    ("model.stage_channels", "model.backbone.stage_channels"),
    ("model.mask_encoder_channels", "model.backbone.mask_encoder_channels"),
];

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn leaf_keys(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaf_keys(&key, child, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

impl RunConfig {
    /// Every accepted dotted key, aliases included.
    pub fn keys() -> Vec<String> {
        let mut out = Vec::new();
        let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
        leaf_keys("", &defaults, &mut out);
        out.extend(ALIASES.iter().map(|(a, _)| a.to_string()));
        out.sort();
        out
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs);
        let mut json = serde_json::to_value(RunConfig::default()).expect("config serializes");
        for (key, value) in pairs {
            let value = serde_json::to_value(&value).map_err(|e| Error::Config(format!("{key}: {e}")))?;
            set_json(&mut json, &key, value)?;
        }
        Self::from_json(json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Overrides one key. `raw` is read as a TOML value, falling back to a
    /// bare string (so `memory.policy=fixed-n:7` needs no quotes).
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let value: Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(t) => serde_json::to_value(&t["v"]).map_err(|e| Error::Config(format!("{key}: {e}")))?,
            Err(_) => Value::String(raw.to_string()),
        };
        let mut json = serde_json::to_value(&*self).expect("config serializes");
        set_json(&mut json, key, value)?;
        *self = Self::from_json(json)?;
        Ok(())
    }

    fn from_json(json: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate().map_err(|e| Error::Config(format!("synth: {e}")))?;
        self.memory.policy.validate()?;
        if let Some(t) = self.eval.tolerance {
            if !(t >= 0.0) {
                return Err(Error::Config("eval.tolerance must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            policy: self.memory.policy,
            merge: self.infer.merge,
            keep_probs: false,
            debug_attention: self.infer.debug_attention,
        }
    }
}

fn set_json(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let path = ALIASES
        .iter()
        .find(|(alias, _)| *alias == key)
        .map_or(key, |(_, target)| target);
    let unknown = || Error::Config(format!("unknown config key {key:?}"));
    let mut node = root;
    for part in path.split('.') {
        node = node.as_object_mut().and_then(|m| m.get_mut(part)).ok_or_else(unknown)?;
    }
    if node.is_object() {
        return Err(Error::Config(format!("{key:?} is a section, not a value")));
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_and_nested_keys() {
        let cfg = RunConfig::from_toml_str(
            r#"
            model.channels = 16
            train.base_lr = 0.001
            memory.policy = "every-k:5"
            [synth]
            height = 32
            sprite_size = [3.0, 5.0]
            [synth.walk]
            dx = [-1.0, 1.0]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.backbone.projection_channels, 16);
        assert_eq!(cfg.train.base_lr, 1e-3);
        assert_eq!(cfg.memory.policy, MemoryPolicy::EveryK(5));
        assert_eq!(cfg.synth.height, 32);
        assert_eq!(cfg.synth.sprite_size, (3.0, 5.0));
        assert_eq!(cfg.synth.walk.dx, (-1.0, 1.0));
        assert_eq!(cfg.train.poly_power, 0.9);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["train.base_rate = 1.0", "[trian]\nseed = 1", "model = 3", "model.backbone = 3"] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(RunConfig::from_toml_str("memory.policy = \"fixed-n:1\"").is_err());
        assert!(RunConfig::from_toml_str("train.crop = 30").is_err());
        assert!(RunConfig::from_toml_str("train.base_lr = \"fast\"").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("memory.policy", "fixed-n:3").unwrap();
        cfg.set("train.seed", "17").unwrap();
        cfg.set("eval.tolerance", "2.5").unwrap();
        cfg.set("infer.merge", "argmax").unwrap();
        assert_eq!(cfg.memory.policy, MemoryPolicy::FixedN(3));
        assert_eq!(cfg.train.seed, 17);
        assert_eq!(cfg.eval.tolerance, Some(2.5));
        assert_eq!(cfg.pipeline().merge, MergeMode::Argmax);
        assert!(cfg.set("train.sed", "1").is_err());
    }

    #[test]
    fn key_listing_covers_defaults() {
        let keys = RunConfig::keys();
        for k in ["model.channels", "train.base_lr", "memory.policy", "synth.walk.dx", "eval.tolerance"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }
}
