//! Run configuration: one TOML document, every field addressable by a
//! dotted key such as `pretrain.base_lr` or `model.vit.depth`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::infer::SlidingWindowConfig;
use crate::models::{Method, ModelConfig};
use crate::patch::MaskingConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub sliding_window: SlidingWindowConfig,
    pub labeled_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Simmim,
            model: ModelConfig::tiny(),
            masking: MaskingConfig {
                masked_patch: 16,
                ratio: 0.75,
            },
            pretrain: TrainConfig {
                batch_size: 4,
                ..TrainConfig::default()
            },
            finetune: TrainConfig::default(),
            sliding_window: SlidingWindowConfig::default(),
            labeled_ratio: 1.0,
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `path` (dotted) in `table`, creating intermediate tables.
pub fn set_dotted(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed key `{path}`")));
    }
    let (last, parents) = keys.split_last().expect("non-empty split");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{k}` in `{path}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, overlaid by the TOML document `text` (if any), overlaid by
    /// `key=value` overrides in order.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table =
            Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(text) = text {
            let file: Table = text
                .parse()
                .map_err(|e| Error::Config(format!("config: {e}")))?;
            merge(&mut table, file);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path.map(std::fs::read_to_string).transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let p = self.model.vit.token_patch;
        self.pretrain.validate(p)?;
        self.finetune.validate(p)?;
        self.sliding_window.stride()?;
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_ratio {} outside (0, 1]",
                self.labeled_ratio
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
