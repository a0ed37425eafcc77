//! Optional JSON configuration merged under command-line flags.

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};
use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::Path;

/// Flat JSON object keyed by long flag names (`-` or `_` separators).
#[derive(Default)]
pub struct FileConfig {
    entries: Map<String, Value>,
    used: RefCell<BTreeSet<String>>,
}

fn normalize(key: &str) -> String {
    key.replace('_', "-")
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| orbvo::Error::InvalidInput(format!("config {}: {e}", path.display())))?;
        let Value::Object(obj) = value else {
            return Err(orbvo::Error::InvalidInput("config must be a JSON object".into()).into());
        };
        let entries = obj.into_iter().map(|(k, v)| (normalize(&k), v)).collect();
        Ok(Self { entries, used: RefCell::default() })
    }

    fn raw(&self, key: &str) -> Option<&Value> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key)
    }

    /// `flag` when given, else the config entry, else `None`.
    pub fn pick<T: serde::de::DeserializeOwned>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let from_file = self.raw(key);
        if flag.is_some() {
            return Ok(flag);
        }
        match from_file {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| orbvo::Error::InvalidInput(format!("config key `{key}`: {e}")).into()),
        }
    }

    pub fn flag(&self, key: &str, set: bool) -> Result<bool> {
        Ok(self.pick(key, set.then_some(true))?.unwrap_or(false))
    }

    /// Fails on keys no flag of the running subcommand consumed.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self.entries.keys().filter(|k| !used.contains(*k)).collect();
        if !unknown.is_empty() {
            bail!(orbvo::Error::InvalidInput(format!("unknown config keys: {unknown:?}")));
        }
        Ok(())
    }
}
