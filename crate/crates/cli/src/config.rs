//! Flat `key = value` experiment configuration.
//!
//! One entry per line, `#` starts a comment, keys are dotted namespaces such
//! as `train.rho`. Later entries and `--set` overrides replace earlier ones.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Error that maps to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "data.train",
    "data.test",
    "data.one_based_features",
    "data.one_based_labels",
    "data.num_features",
    "preprocess.policy",
    "preprocess.pca_k",
    "preprocess.validation_fraction",
    "preprocess.feature_dim",
    "aux.lambda_n",
    "train.method",
    "train.noise",
    "train.frequency_smoothing",
    "train.rho",
    "train.lambda",
    "train.epochs",
    "train.negatives",
    "train.log_every_steps",
    "train.save_accumulators",
    "eval.bias_removal",
    "eval.top_k",
    "eval.split",
    "diagnose.problem",
    "diagnose.contexts",
    "diagnose.labels",
    "diagnose.n_scale",
    "diagnose.noise",
    "diagnose.candidates",
    "diagnose.mc_samples",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut cfg = Config::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!("config line {}: expected `key = value`", i + 1)));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(usage(format!("unknown config key '{key}'")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> anyhow::Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("override '{spec}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key {key}: cannot parse '{v}': {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> anyhow::Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> anyhow::Result<T>
    where
        T::Err: fmt::Display,
    {
        self.get(key)?.ok_or_else(|| usage(format!("missing required config key '{key}'")))
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        self.require("seed")
    }

    /// Sorted `key = value` lines; parsing the result gives back `self`.
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
