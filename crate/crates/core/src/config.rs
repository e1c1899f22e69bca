//! Training configuration, presets and `key=value` overrides.
//!
//! Configuration files are TOML. Nested settings use sections (`[optim.lr]`)
//! in files and dotted keys (`optim.lr.positions=2e-4`) in overrides. A file
//! may name a `preset` that its other keys are applied on top of.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{ConfigError, Error, Result};
use crate::loss::LossConfig;
use crate::optim::AdamConfig;
use crate::raster::RenderConfig;
use crate::scene::{Aabb, InitOptions};

pub const PRESETS: [&str; 3] = ["toy", "small", "paper"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub gaussians: usize,
    pub seed: u64,
    /// Worker threads for the render and loss kernels; `0` uses every core.
    pub workers: usize,
    pub fusion_weight: f64,
    /// Disables the medium branch entirely (base render only).
    pub medium_enabled: bool,
    /// Steps per SH degree increment.
    pub sh_warmup_interval: u64,
    pub downscale: usize,
    /// Every n-th frame is held out when the manifest has no split; `0` holds
    /// out nothing.
    pub holdout_every: usize,
    /// Intervals in steps; `0` disables. Logging always covers the last step.
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
    /// Initialization box as `[min_x, min_y, min_z, max_x, max_y, max_z]`;
    /// empty takes the manifest bounds or the camera-derived box.
    pub bounds: Vec<f64>,
    pub init: InitOptions,
    pub loss: LossConfig,
    pub optim: AdamConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 150_000,
            gaussians: 100_000,
            seed: 0,
            workers: 0,
            fusion_weight: crate::medium::DEFAULT_FUSION_WEIGHT,
            medium_enabled: true,
            sh_warmup_interval: 10_000,
            downscale: 1,
            holdout_every: 8,
            log_interval: 100,
            checkpoint_interval: 10_000,
            eval_interval: 10_000,
            bounds: Vec::new(),
            init: InitOptions::default(),
            loss: LossConfig::default(),
            optim: AdamConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "paper" => base,
            "small" => Self {
                steps: 5_000,
                gaussians: 500,
                sh_warmup_interval: 1_000,
                log_interval: 50,
                checkpoint_interval: 2_500,
                eval_interval: 1_000,
                ..base
            },
            "toy" => Self {
                steps: 2_000,
                gaussians: 500,
                sh_warmup_interval: 500,
                log_interval: 20,
                checkpoint_interval: 1_000,
                eval_interval: 500,
                ..base
            },
            other => return Err(ConfigError::UnknownPreset(other.to_string()).into()),
        })
    }

    pub fn bounds_box(&self) -> Option<Aabb> {
        match self.bounds[..] {
            [a, b, c, d, e, f] => Some(Aabb::new([a, b, c], [d, e, f])),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, reason: String| -> Error {
            ConfigError::InvalidValue {
                key: key.to_string(),
                reason,
            }
            .into()
        };
        if self.steps == 0 {
            return Err(invalid("steps", "must be at least 1".into()));
        }
        if self.gaussians == 0 {
            return Err(invalid("gaussians", "must be at least 1".into()));
        }
        if self.downscale == 0 {
            return Err(invalid("downscale", "must be at least 1".into()));
        }
        if self.sh_warmup_interval == 0 {
            return Err(invalid("sh_warmup_interval", "must be at least 1".into()));
        }
        if !(self.fusion_weight.is_finite() && self.fusion_weight >= 0.0) {
            return Err(invalid("fusion_weight", "must be finite and non-negative".into()));
        }
        for (key, v) in [
            ("log_interval", self.log_interval),
            ("checkpoint_interval", self.checkpoint_interval),
            ("eval_interval", self.eval_interval),
        ] {
            if v > self.steps {
                return Err(invalid(key, format!("{v} exceeds steps = {}", self.steps)));
            }
        }
        if !(self.bounds.is_empty() || self.bounds.len() == 6) {
            return Err(invalid("bounds", "expected 0 or 6 numbers".into()));
        }
        if let Some(b) = self.bounds_box() {
            b.validate().map_err(|e| invalid("bounds", e.to_string()))?;
        }
        self.loss.validate().map_err(|e| invalid("loss", e.to_string()))?;
        self.optim.validate().map_err(|e| invalid("optim", e.to_string()))?;
        self.render.validate().map_err(|e| invalid("render", e.to_string()))?;
        Ok(())
    }

    fn to_table(&self) -> Table {
        match Value::try_from(self).expect("config serializes") {
            Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        }
    }

    fn from_table(table: Table, key: &str) -> Result<Self> {
        Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            ConfigError::InvalidValue {
                key: key.to_string(),
                reason: e.message().to_string(),
            }
            .into()
        })
    }

    /// Parses a config file body on top of its `preset` (default "paper").
    /// Every unknown key is reported at once.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut file: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let base = match file.remove("preset") {
            Some(Value::String(name)) => Self::preset(&name)?,
            Some(other) => {
                return Err(ConfigError::InvalidValue {
                    key: "preset".into(),
                    reason: format!("expected a string, found {other}"),
                }
                .into())
            }
            None => Self::default(),
        };
        let mut table = base.to_table();
        let mut unknown = Vec::new();
        merge(&mut table, file, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown).into());
        }
        let mut cfg = Self::from_table(table, "config file")?;
        let explicit: Vec<String> = text
            .parse::<Table>()
            .map(|t| t.keys().cloned().collect())
            .unwrap_or_default();
        cfg.fit_intervals(&explicit);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies `key=value` overrides. Unknown keys are all reported together
    /// before any value is checked.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut parsed = Vec::new();
        let mut unknown = Vec::new();
        let table = self.to_table();
        for raw in overrides {
            let raw = raw.as_ref();
            let Some((key, value)) = raw.split_once('=') else {
                return Err(ConfigError::Parse(format!("override `{raw}` is not key=value")).into());
            };
            let key = key.trim();
            if lookup(&table, key).is_none() {
                unknown.push(key.to_string());
            }
            parsed.push((key.to_string(), value.trim().to_string()));
        }
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown).into());
        }
        let mut cfg = self.clone();
        let explicit: Vec<String> = parsed.iter().map(|(k, _)| k.clone()).collect();
        for (key, value) in parsed {
            let mut table = cfg.to_table();
            let slot = lookup_mut(&mut table, &key).expect("key checked above");
            *slot = coerce(parse_value(&value), slot);
            cfg = Self::from_table(table, &key)?;
        }
        cfg.fit_intervals(&explicit);
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// Shrinks intervals that were not set explicitly to at most `steps`.
    fn fit_intervals(&mut self, explicit: &[String]) {
        let steps = self.steps;
        for (key, v) in [
            ("log_interval", &mut self.log_interval),
            ("checkpoint_interval", &mut self.checkpoint_interval),
            ("eval_interval", &mut self.eval_interval),
        ] {
            if !explicit.iter().any(|k| k == key) {
                *v = (*v).min(steps);
            }
        }
    }

    /// TOML snapshot with every effective value.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn get(&self, key: &str) -> Option<String> {
        lookup(&self.to_table(), key).map(|v| v.to_string())
    }
}

fn merge(dst: &mut Table, src: Table, prefix: &str, unknown: &mut Vec<String>) {
    for (k, v) in src {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (dst.get_mut(&k), v) {
            (None, Value::Table(t)) if !t.is_empty() => {
                for (sub, _) in t {
                    unknown.push(format!("{path}.{sub}"));
                }
            }
            (None, _) => unknown.push(path),
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &path, unknown),
            (Some(slot), v) => *slot = coerce(v, slot),
        }
    }
}

fn lookup<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn lookup_mut<'a>(table: &'a mut Table, key: &str) -> Option<&'a mut Value> {
    let mut parts = key.split('.');
    let mut cur = table.get_mut(parts.next()?)?;
    for p in parts {
        cur = cur.as_table_mut()?.get_mut(p)?;
    }
    Some(cur)
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Integers written where a float is expected are widened.
fn coerce(v: Value, existing: &Value) -> Value {
    match (v, existing) {
        (Value::Integer(i), Value::Float(_)) => Value::Float(i as f64),
        (Value::Array(a), Value::Array(_)) => Value::Array(
            a.into_iter()
                .map(|x| match x {
                    Value::Integer(i) => Value::Float(i as f64),
                    x => x,
                })
                .collect(),
        ),
        (v, _) => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_preset_values() {
        let c = TrainConfig::preset("paper").unwrap();
        assert_eq!(c.steps, 150_000);
        assert_eq!(c.gaussians, 100_000);
        assert_eq!(c.optim.lr.positions, 1.6e-4);
        assert_eq!(c.optim.lr.rotations, 1e-3);
        assert_eq!(c.optim.lr.scales, 5e-3);
        assert_eq!(c.optim.lr.opacities, 5e-2);
        assert_eq!(c.optim.lr.mlp, 1e-3);
        assert_eq!(c.loss.lambda, 0.2);
        assert_eq!(c.fusion_weight, 0.2);
        c.validate().unwrap();
        TrainConfig::preset("toy").unwrap().validate().unwrap();
        TrainConfig::preset("small").unwrap().validate().unwrap();
        assert!(matches!(
            TrainConfig::preset("huge"),
            Err(Error::Config(ConfigError::UnknownPreset(_)))
        ));
    }

    #[test]
    fn overrides_set_nested_values() {
        let mut c = TrainConfig::preset("toy").unwrap();
        c.apply_overrides(&[
            "optim.lr.positions=2e-4",
            "steps=300",
            "fusion_weight=0",
            "bounds=[-1,-1,-1,1,1,1]",
        ])
        .unwrap();
        assert_eq!(c.optim.lr.positions, 2e-4);
        assert_eq!(c.steps, 300);
        assert_eq!(c.fusion_weight, 0.0);
        assert_eq!(c.bounds_box(), Some(Aabb::new([-1.0; 3], [1.0; 3])));
        assert_eq!((c.log_interval, c.checkpoint_interval, c.eval_interval), (20, 300, 300));
    }

    #[test]
    fn unknown_override_keys_listed_together() {
        let mut c = TrainConfig::preset("toy").unwrap();
        let before = c.clone();
        match c.apply_overrides(&["stepz=3", "seed=4", "optim.lr.colour=1"]) {
            Err(Error::Config(ConfigError::UnknownKeys(k))) => {
                assert_eq!(k, vec!["stepz".to_string(), "optim.lr.colour".to_string()])
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(c, before);
    }

    #[test]
    fn wrong_type_and_range_are_invalid_values() {
        let mut c = TrainConfig::preset("toy").unwrap();
        assert!(matches!(
            c.apply_overrides(&["steps=lots"]),
            Err(Error::Config(ConfigError::InvalidValue { ref key, .. })) if key == "steps"
        ));
        assert!(matches!(
            c.apply_overrides(&["log_interval=5000"]),
            Err(Error::Config(ConfigError::InvalidValue { ref key, .. })) if key == "log_interval"
        ));
    }

    #[test]
    fn file_round_trip_and_unknown_keys() {
        let c = TrainConfig::preset("small").unwrap();
        let text = c.to_toml_string();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);

        let f = TrainConfig::from_toml_str("preset = \"toy\"\nseed = 9\n[optim.lr]\nmlp = 0.01\n").unwrap();
        assert_eq!(f.steps, 2_000);
        assert_eq!(f.seed, 9);
        assert_eq!(f.optim.lr.mlp, 0.01);

        match TrainConfig::from_toml_str("speed = 1\n[loss]\nlamda = 0.3\n[extra]\na = 1\n") {
            Err(Error::Config(ConfigError::UnknownKeys(k))) => {
                assert_eq!(k, vec!["extra.a", "loss.lamda", "speed"])
            }
            other => panic!("{other:?}"),
        }
    }
}
