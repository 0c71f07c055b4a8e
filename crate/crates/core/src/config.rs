//! TOML run configuration with `section.key = value` overrides.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClipConfig, LabNorm};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::propagation::PropagationConfig;
use crate::spatial::SpatialConfig;
use crate::temporal::TemporalConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Seeds pair sampling, augmentation and dropout draws.
    pub seed: u64,
    /// Log a progress line every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, log_every: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training clips; clip `i` is generated with seed `seed + i`.
    pub train_clips: usize,
    pub seed: u64,
    pub lab: LabNorm,
    pub clip: ClipConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_clips: 32,
            seed: 0,
            lab: LabNorm::default(),
            clip: ClipConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out clips; clip `i` is generated with seed `seed + i`.
    pub clips: usize,
    pub seed: u64,
    /// Pyramid level used for propagation; defaults to the second-coarsest.
    pub level: Option<usize>,
    /// Boundary matching tolerance in pixels; defaults to 0.8% of the diagonal.
    pub tolerance: Option<usize>,
    pub clip: ClipConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            clips: 20,
            seed: 1_000_000,
            level: None,
            tolerance: None,
            clip: ClipConfig {
                length: 20,
                ..ClipConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub encoder: EncoderConfig,
    pub data: DataSection,
    pub spatial: SpatialConfig,
    pub temporal: TemporalConfig,
    pub propagation: PropagationConfig,
    pub eval: EvalSection,
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`. A table whose keys all exist in
/// the base table merges into it; any other value, including a table that
/// switches an enum variant, replaces it.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if t.keys().all(|k| b.contains_key(k)) => {
                merge(b, t)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parses TOML text over the defaults, applies `(key, value)` overrides
    /// and validates. A partially specified section keeps the defaults of
    /// its enclosing section for every key it omits.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut table =
            toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, user);
        for (k, v) in overrides {
            set_path(&mut table, k, parse_value(v))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.temporal.validate(&self.encoder.stage_total_strides)?;
        self.propagation.validate()?;
        self.spatial.augmentation.validate()?;
        let m = self.encoder.coarsest_stride();
        for (name, clip) in [("data.clip", &self.data.clip), ("eval.clip", &self.eval.clip)] {
            if clip.height % m != 0 || clip.width % m != 0 {
                return Err(Error::Config(format!(
                    "{name}: frame size {}x{} must be a multiple of {m}",
                    clip.height, clip.width
                )));
            }
        }
        if self.spatial.augmentation.out_size % m != 0 {
            return Err(Error::Config(format!("spatial.augmentation.out_size must be a multiple of {m}")));
        }
        if let Some(l) = self.eval.level {
            if l >= self.encoder.levels() {
                return Err(Error::Config(format!("eval.level {l} exceeds the encoder's levels")));
            }
        }
        Ok(())
    }

    /// Level at which labels are propagated.
    pub fn eval_level(&self) -> usize {
        self.eval.level.unwrap_or(self.encoder.levels().saturating_sub(2))
    }
}
