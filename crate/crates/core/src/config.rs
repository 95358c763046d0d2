//! Pipeline settings addressed by dotted keys.
//!
//! A config file is TOML; tables flatten into dotted keys, so
//! `[sampler]\nwindows = 8` and `"sampler.windows" = 8` are the same setting.
//! Command-line overrides use the same keys and are applied after the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anomaly::{AnomalyConfig, IntervalMode};
use crate::dtree::TreeParams;
use crate::error::ConfigError;
use crate::labeler::LabelerConfig;
use crate::sampler::WindowConfig;
use crate::types::{ChannelId, ChannelSchema, TaskLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineConfig {
    pub debounce: usize,
    /// Seconds per timestamp unit.
    pub tick_seconds: f64,
}

impl Default for TimelineConfig {
    fn default() -> Self {
        TimelineConfig { debounce: 2, tick_seconds: 0.001 }
    }
}

/// How the prediction worker picks up retrained models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapMode {
    /// Adopt each retrained model a fixed number of frames after its batch was
    /// dispatched, waiting for it if needed. Replays are reproducible.
    Deterministic,
    /// Use whatever model is published when a frame arrives; never wait.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schema: ChannelSchema,
    pub sampler: WindowConfig,
    pub labeler: LabelerConfig,
    pub tree: TreeParams,
    pub anomaly: AnomalyConfig,
    pub timeline: TimelineConfig,
    pub retrain: bool,
    pub retrain_every: usize,
    pub train_fraction: f64,
    pub replay_speed: f64,
    pub seed: u64,
    pub swap_mode: SwapMode,
    pub swap_lag: usize,
    pub queue_depth: usize,
    pub dataset_capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema: ChannelSchema::reference(),
            sampler: WindowConfig::default(),
            labeler: LabelerConfig::default(),
            tree: TreeParams { max_depth: Some(6), ..TreeParams::default() },
            anomaly: AnomalyConfig::default(),
            timeline: TimelineConfig::default(),
            retrain: true,
            retrain_every: 256,
            train_fraction: 0.7,
            replay_speed: 0.0,
            seed: 7,
            swap_mode: SwapMode::Deterministic,
            swap_lag: 64,
            queue_depth: 4,
            dataset_capacity: 200_000,
        }
    }
}

/// Every key `set` understands.
pub const KEYS: &[&str] = &[
    "schema.channels",
    "sampler.windows",
    "sampler.capacity",
    "sampler.gap",
    "sampler.stale_ms",
    "labeler.k",
    "labeler.restarts",
    "labeler.max_iter",
    "labeler.tol",
    "labeler.channels",
    "tree.min_leaf",
    "tree.max_depth",
    "tree.prune",
    "tree.confidence",
    "anomaly.level",
    "anomaly.mode",
    "anomaly.min_history",
    "anomaly.variance_floor",
    "anomaly.update_on_abnormal",
    "timeline.debounce",
    "timeline.tick_seconds",
    "retrain",
    "retrain_every",
    "train_fraction",
    "replay_speed",
    "seed",
    "swap_mode",
    "swap_lag",
    "queue_depth",
    "dataset_capacity",
];

fn invalid(key: &str, value: &str) -> ConfigError {
    ConfigError::InvalidValue { key: key.to_string(), value: value.to_string() }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| invalid(key, value))
}

fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(invalid(key, value)),
    }
}

fn channel_list(key: &str, value: &str) -> Result<Vec<ChannelId>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| ChannelId::new(s).map_err(|_| invalid(key, value)))
        .collect()
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "schema.channels" => {
                self.schema = ChannelSchema::new(channel_list(key, value)?).map_err(|_| invalid(key, value))?
            }
            "sampler.windows" => self.sampler.windows = num(key, value)?,
            "sampler.capacity" => self.sampler.capacity = num(key, value)?,
            "sampler.gap" => self.sampler.gap = num(key, value)?,
            "sampler.stale_ms" => self.sampler.stale_after_ms = num(key, value)?,
            "labeler.k" => self.labeler.k = num(key, value)?,
            "labeler.restarts" => self.labeler.restarts = num(key, value)?,
            "labeler.max_iter" => self.labeler.max_iter = num(key, value)?,
            "labeler.tol" => self.labeler.tol = num(key, value)?,
            "labeler.channels" => {
                let list = channel_list(key, value)?;
                self.labeler.channels = if list.is_empty() { None } else { Some(list) };
            }
            "tree.min_leaf" => self.tree.min_leaf_size = num(key, value)?,
            "tree.max_depth" => {
                self.tree.max_depth = match value.trim() {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "tree.prune" => self.tree.prune = flag(key, value)?,
            "tree.confidence" => self.tree.confidence = num(key, value)?,
            "anomaly.level" => self.anomaly.level = num(key, value)?,
            "anomaly.mode" => self.anomaly.mode = value.parse::<IntervalMode>().map_err(|_| invalid(key, value))?,
            "anomaly.min_history" => self.anomaly.min_history = num(key, value)?,
            "anomaly.variance_floor" => self.anomaly.variance_floor = num(key, value)?,
            "anomaly.update_on_abnormal" => self.anomaly.update_on_abnormal = flag(key, value)?,
            "timeline.debounce" => self.timeline.debounce = num(key, value)?,
            "timeline.tick_seconds" => self.timeline.tick_seconds = num(key, value)?,
            "retrain" => self.retrain = flag(key, value)?,
            "retrain_every" => self.retrain_every = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "replay_speed" => self.replay_speed = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "swap_mode" => {
                self.swap_mode = match value.trim().to_ascii_lowercase().as_str() {
                    "deterministic" => SwapMode::Deterministic,
                    "live" => SwapMode::Live,
                    _ => return Err(invalid(key, value)),
                }
            }
            "swap_lag" => self.swap_lag = num(key, value)?,
            "queue_depth" => self.queue_depth = num(key, value)?,
            "dataset_capacity" => self.dataset_capacity = num(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| invalid(assignment, ""))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies every setting of a TOML document.
    pub fn apply_toml(&mut self, text: &str) -> Result<(), ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::File(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat);
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File(format!("{}: {e}", path.display())))?;
        let mut cfg = PipelineConfig::default();
        cfg.apply_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Constraint(m.to_string()));
        self.sampler.validate().map_err(|e| ConfigError::Constraint(e.to_string()))?;
        self.tree.validate().map_err(|e| ConfigError::Constraint(e.to_string()))?;
        if self.retrain_every == 0 {
            return fail("retrain_every must be >= 1");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail("train_fraction must lie in (0, 1)");
        }
        if !(self.replay_speed >= 0.0 && self.replay_speed.is_finite()) {
            return fail("replay_speed must be >= 0");
        }
        if self.labeler.k != TaskLabel::COUNT {
            return fail("labeler.k must equal the number of task labels");
        }
        if self.labeler.restarts == 0 || self.labeler.max_iter == 0 {
            return fail("labeler.restarts and labeler.max_iter must be >= 1");
        }
        if let Some(chs) = &self.labeler.channels {
            if let Some(c) = chs.iter().find(|c| self.schema.index_of(c.as_str()).is_none()) {
                return Err(ConfigError::Constraint(format!("labeler.channels: {c} is not in the schema")));
            }
        }
        if !(self.anomaly.level > 0.0 && self.anomaly.level < 1.0) {
            return fail("anomaly.level must lie in (0, 1)");
        }
        if self.anomaly.variance_floor < 0.0 {
            return fail("anomaly.variance_floor must be >= 0");
        }
        if self.timeline.debounce == 0 {
            return fail("timeline.debounce must be >= 1");
        }
        if !(self.timeline.tick_seconds > 0.0 && self.timeline.tick_seconds.is_finite()) {
            return fail("timeline.tick_seconds must be > 0");
        }
        if self.swap_lag > self.retrain_every {
            return fail("swap_lag must not exceed retrain_every");
        }
        if self.queue_depth == 0 {
            return fail("queue_depth must be >= 1");
        }
        if self.dataset_capacity == 0 {
            return fail("dataset_capacity must be >= 1");
        }
        Ok(())
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        toml::Value::Array(items) => {
            let parts: Vec<String> = items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            out.push((prefix.to_string(), parts.join(",")));
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.retrain_every, 256);
        assert_eq!(c.train_fraction, 0.7);
        assert_eq!(c.anomaly.level, 0.99);
        assert_eq!(c.anomaly.min_history, 5);
        assert_eq!(c.tree.max_depth, Some(6));
    }

    #[test]
    fn every_listed_key_is_settable() {
        let samples = [
            ("schema.channels", "RING3.Z,INDEX1.Z"),
            ("labeler.channels", "RING3.Z"),
            ("tree.max_depth", "6"),
            ("tree.prune", "true"),
            ("anomaly.mode", "predictive"),
            ("anomaly.update_on_abnormal", "no"),
            ("retrain", "off"),
            ("swap_mode", "live"),
        ];
        for key in KEYS {
            let value = samples.iter().find(|(k, _)| k == key).map_or("3", |(_, v)| v);
            let mut c = PipelineConfig::default();
            c.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn toml_tables_and_dotted_keys() {
        let mut c = PipelineConfig::default();
        c.apply_toml(
            "seed = 11\nretrain_every = 128\n\"timeline.debounce\" = 3\n[sampler]\nwindows = 8\nstale_ms = 500\n\
             [labeler]\nchannels = [\"RING3.Z\", \"INDEX2.Z\"]\n[anomaly]\nlevel = 0.95\nmode = \"predictive\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.retrain_every, 128);
        assert_eq!(c.timeline.debounce, 3);
        assert_eq!(c.sampler.windows, 8);
        assert_eq!(c.sampler.stale_after_ms, 500);
        assert_eq!(c.labeler.channels.as_ref().unwrap().len(), 2);
        assert_eq!(c.anomaly.level, 0.95);
        assert_eq!(c.anomaly.mode, IntervalMode::Predictive);
        c.validate().unwrap();
    }

    #[test]
    fn overrides_and_errors() {
        let mut c = PipelineConfig::default();
        c.apply_override("train_fraction=0.8").unwrap();
        assert_eq!(c.train_fraction, 0.8);
        assert_eq!(c.set("nope", "1"), Err(ConfigError::UnknownKey("nope".into())));
        assert!(matches!(c.set("seed", "abc"), Err(ConfigError::InvalidValue { .. })));
        assert!(c.apply_override("seed").is_err());
        assert!(c.apply_toml("[[bad").is_err());

        c.set("train_fraction", "1.0").unwrap();
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.set("retrain_every", "0").unwrap();
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.set("labeler.channels", "NOT.THERE").unwrap();
        assert!(c.validate().is_err());
    }
}
