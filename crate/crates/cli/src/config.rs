use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

/// Settings from `--config`. Keys are flag names (`budget_flops` or
/// `budget-flops`); an object keyed by a subcommand name overrides top-level
/// keys for that subcommand. Command-line flags win over both.
#[derive(Debug, Default)]
pub struct Config {
    top: Map<String, Value>,
    section: Map<String, Value>,
}

fn canonical(map: Map<String, Value>) -> Map<String, Value> {
    map.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect()
}

impl Config {
    pub fn load(path: Option<&Path>, command: &str) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(map) = value else {
            bail!("config {} must be a JSON object", path.display());
        };
        let mut top = canonical(map);
        let section = match top.remove(command) {
            Some(Value::Object(m)) => canonical(m),
            Some(_) => bail!("config section \"{command}\" must be an object"),
            None => Map::new(),
        };
        Ok(Config { top, section })
    }

    fn raw(&self, key: &str) -> Option<&Value> {
        self.section.get(key).or_else(|| self.top.get(key))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| serde_json::from_value(v.clone()).with_context(|| format!("config key \"{key}\"")))
            .transpose()
    }

    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    pub fn optional<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    pub fn require<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.optional(flag, key)?
            .ok_or_else(|| anyhow!("missing --{} (flag or config key)", key.replace('_', "-")))
    }

    /// Like `pick` for values given as strings and parsed with `FromStr`.
    pub fn parsed<T>(&self, flag: Option<String>, key: &str, default: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: std::error::Error + Send + Sync + 'static,
    {
        let s = self.pick(flag, key, default.to_string())?;
        s.parse::<T>().with_context(|| format!("--{}", key.replace('_', "-")))
    }
}
