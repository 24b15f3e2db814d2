//! Run configuration: model hyperparameters plus optimization settings,
//! loadable from a flat `key = value` text file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{Activation, ModelConfig};
use crate::error::{Error, Result};

/// Every tunable knob of a training run. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Worker threads for training and evaluation; 0 uses every core.
    pub workers: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            model: ModelConfig::default(),
            lr: 1e-4,
            lambda: 1e-5,
            batch_size: 64,
            max_epochs: 50,
            patience: 25,
            workers: 1,
        }
    }
}

/// Keys accepted by [`Config::set`] and the config file.
pub const KEYS: &[&str] = &[
    "seed",
    "d",
    "depth",
    "widths",
    "agg_layers",
    "heads",
    "dropout",
    "lr",
    "lambda",
    "batch_size",
    "max_epochs",
    "patience",
    "time_unit_seconds",
    "time_buckets",
    "activation",
    "use_time",
    "use_position",
    "static_items",
    "workers",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

impl Config {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        match key {
            "seed" => self.seed = num(key, value)?,
            "d" => m.dim = num(key, value)?,
            "depth" => m.depth = num(key, value)?,
            "widths" => {
                m.widths = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|w| num(key, w.trim())).collect::<Result<_>>()?
                }
            }
            "agg_layers" => m.agg_layers = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "time_unit_seconds" => m.time_unit_seconds = num(key, value)?,
            "time_buckets" => m.time_buckets = num(key, value)?,
            "activation" => m.activation = value.parse::<Activation>().map_err(|e| Error::Config(e.to_string()))?,
            "use_time" => m.use_time = boolean(key, value)?,
            "use_position" => m.use_position = boolean(key, value)?,
            "static_items" => m.static_items = boolean(key, value)?,
            "workers" => self.workers = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults. Blank lines, `#` and
    /// `;` comments and `[section]` headers are ignored; unknown keys fail.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') || line.starts_with('[') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Renders the config in the file format accepted by [`Config::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let widths: Vec<String> = m.widths.iter().map(|w| w.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("d", m.dim.to_string()),
            ("depth", m.depth.to_string()),
            ("widths", widths.join(",")),
            ("agg_layers", m.agg_layers.to_string()),
            ("heads", m.heads.to_string()),
            ("dropout", m.dropout.to_string()),
            ("lr", self.lr.to_string()),
            ("lambda", self.lambda.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("time_unit_seconds", m.time_unit_seconds.to_string()),
            ("time_buckets", m.time_buckets.to_string()),
            ("activation", m.activation.to_string()),
            ("use_time", m.use_time.to_string()),
            ("use_position", m.use_position.to_string()),
            ("static_items", m.static_items.to_string()),
            ("workers", self.workers.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!(c.model.dim, 160);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.max_epochs, 50);
        assert_eq!(c.patience, 25);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.model.dropout, 0.1);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parses_and_round_trips() {
        let text =
            "# comment\n[model]\nd = 32\ndepth = 1\nwidths = 10\nlr=0.01\nactivation = tanh\n\nstatic_items = true\n";
        let c = Config::parse(text).unwrap();
        assert_eq!(c.model.dim, 32);
        assert_eq!(c.model.widths, vec![10]);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.model.activation, Activation::Tanh);
        assert!(c.model.static_items);
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_key_is_settable() {
        let text = Config::default().to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, KEYS);
    }

    #[test]
    fn unknown_key_fails_fast() {
        let err = Config::parse("d = 32\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn bad_values_fail() {
        assert!(Config::parse("d = abc").is_err());
        assert!(Config::parse("just text").is_err());
        assert!(Config::parse("depth = 3").is_err());
        assert!(Config::parse("use_time = maybe").is_err());
    }
}
