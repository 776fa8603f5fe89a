//! Experiment configuration as flat `dotted.key = value` text.
//!
//! Every field of [`ExperimentConfig`] has a key such as
//! `backbone.num_experts`, `mcrm.lambda` or `train.lr`. Lists are comma separated,
//! optional values accept `none`, and `#` starts a comment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::data::AugmentPolicy;
use crate::engine::TrainConfig;
use crate::error::{Result, SemcError};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub split_seed: u64,
    pub augment: bool,
    pub rotation_deg: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub brightness_lo: f64,
    pub brightness_hi: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = AugmentPolicy::default();
        Self {
            manifest: PathBuf::from("data/manifest.csv"),
            split_seed: 0,
            augment: true,
            rotation_deg: p.rotation_deg,
            hflip_p: p.hflip_p,
            vflip_p: p.vflip_p,
            brightness_lo: p.brightness.0,
            brightness_hi: p.brightness.1,
        }
    }
}

impl DataConfig {
    /// Augmentation policy at `size`, or `None` when augmentation is off.
    pub fn policy(&self, size: usize) -> Option<AugmentPolicy> {
        self.augment.then_some(AugmentPolicy {
            rotation_deg: self.rotation_deg,
            hflip_p: self.hflip_p,
            vflip_p: self.vflip_p,
            brightness: (self.brightness_lo, self.brightness_hi),
            size,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(flatten)]
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(p) = self.data.policy(self.model.backbone.input_size) {
            p.validate()?;
        }
        Ok(())
    }

    /// All keys and their current values, sorted by key.
    pub fn to_flat(&self) -> BTreeMap<String, String> {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = BTreeMap::new();
        flatten("", &value, &mut out);
        out
    }

    pub fn to_text(&self) -> String {
        self.to_flat()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key=value` assignments on top of `self`.
    pub fn with_overrides<'a>(
        &self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in pairs {
            set_leaf(&mut tree, key.trim(), raw.trim())?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(tree)
            .map_err(|e| SemcError::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            pairs.push(split_assignment(line).map_err(|e| match e {
                SemcError::Config(m) => SemcError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?);
        }
        Self::default().with_overrides(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SemcError::io(path, e))?;
        Self::parse(&text)
    }
}

/// Splits `key=value` (or `key = value`).
pub fn split_assignment(s: &str) -> Result<(&str, &str)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| SemcError::Config(format!("expected `key = value`, got `{s}`")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(SemcError::Config(format!("missing key in `{s}`")));
    }
    Ok((k, v.trim()))
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), render(leaf));
        }
    }
}

fn parse_like(template: &Value, raw: &str, key: &str) -> Result<Value> {
    let bad = || SemcError::Config(format!("cannot parse `{raw}` for `{key}`"));
    if raw.eq_ignore_ascii_case("none") {
        return Ok(Value::Null);
    }
    Ok(match template {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => {
            Value::Number(raw.parse::<u64>().map_err(|_| bad())?.into())
        }
        Value::Number(_) => {
            Value::Number(Number::from_f64(raw.parse::<f64>().map_err(|_| bad())?).ok_or_else(bad)?)
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::Null);
            let parts = raw
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| parse_like(&elem, p, key))
                .collect::<Result<Vec<_>>>()?;
            Value::Array(parts)
        }
        // Optional field currently unset: infer from the literal.
        Value::Null | Value::Object(_) => {
            if let Ok(b) = raw.parse::<bool>() {
                Value::Bool(b)
            } else if let Ok(u) = raw.parse::<u64>() {
                Value::Number(u.into())
            } else if let Some(n) = raw.parse::<f64>().ok().and_then(Number::from_f64) {
                Value::Number(n)
            } else {
                Value::String(raw.to_string())
            }
        }
    })
}

fn set_leaf(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || SemcError::Config(format!("unknown config key `{key}`"));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node.as_object_mut().ok_or_else(unknown)?;
        let child = map.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            if child.is_object() {
                return Err(unknown());
            }
            *child = parse_like(child, raw, key)?;
            return Ok(());
        }
        node = child;
    }
    Err(unknown())
}
