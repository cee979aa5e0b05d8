//! Flat `key = value` configuration files.

use std::collections::BTreeMap;

use thiserror::Error;

use super::TrainConfig;
use crate::model::ModelConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("duplicate key {0:?}")]
    Duplicate(String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?} ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ConfigError::Duplicate(k.to_string()));
        }
    }
    Ok(out)
}

pub fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

/// A configuration section addressable by flat keys.
pub trait KvConfig {
    /// Applies one key; `Ok(false)` when the key belongs to another section.
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError>;
    fn to_kv(&self) -> Vec<(String, String)>;
}

impl KvConfig for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "patch" => self.patch = parse_value(key, value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "depth" => self.depth = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "canvas_side" => self.canvas_side = parse_value(key, value)?,
            "model_seed" => self.seed = parse_value(key, value)?,
            "pos_init" => self.pos_init = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("patch".into(), self.patch.to_string()),
            ("dim".into(), self.dim.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("canvas_side".into(), self.canvas_side.to_string()),
            ("model_seed".into(), self.seed.to_string()),
            ("pos_init".into(), self.pos_init.to_string()),
        ]
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "total_steps" => self.total_steps = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "betas" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        reason: "expected `beta1, beta2`".into(),
                    });
                }
                self.betas = (parse_value(key, parts[0])?, parse_value(key, parts[1])?);
            }
            "eps" => self.eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("base_lr".into(), self.base_lr.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("total_steps".into(), self.total_steps.to_string()),
            ("warmup_steps".into(), self.warmup_steps.to_string()),
            ("betas".into(), format!("{}, {}", self.betas.0, self.betas.1)),
            ("eps".into(), self.eps.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// Applies every entry to the first section that accepts it.
pub fn apply_kv(entries: &BTreeMap<String, String>, sections: &mut [&mut dyn KvConfig]) -> Result<(), ConfigError> {
    'entries: for (k, v) in entries {
        for s in sections.iter_mut() {
            if s.set(k, v)? {
                continue 'entries;
            }
        }
        return Err(ConfigError::UnknownKey(k.clone()));
    }
    Ok(())
}

/// Renders sections back to the file format.
pub fn render_kv(sections: &[&dyn KvConfig]) -> String {
    let mut out = String::new();
    for s in sections {
        for (k, v) in s.to_kv() {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}
