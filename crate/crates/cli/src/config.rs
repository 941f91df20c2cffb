//! Layered configuration: built-in defaults, then the matching section of
//! the JSON config file, then command-line flags.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// An error with a stable machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn config_err(message: impl Into<String>) -> anyhow::Error {
    CliError::new("config", message).into()
}

/// Parsed config file: a top-level object with optional `seed` and one
/// object per subcommand.
#[derive(Debug, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("io", format!("config file {}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(root)) => Ok(Self { root }),
            Ok(_) => Err(config_err(format!("config file {} is not a JSON object", path.display()))),
            Err(e) => Err(config_err(format!("config file {}: {e}", path.display()))),
        }
    }

    pub fn seed(&self) -> anyhow::Result<Option<u64>> {
        match self.root.get("seed") {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| config_err("config file seed must be a non-negative integer")),
        }
    }

    fn section(&self, name: &str) -> anyhow::Result<Map<String, Value>> {
        match self.root.get(name) {
            None => Ok(Map::new()),
            Some(Value::Object(m)) => Ok(m.clone()),
            Some(_) => Err(config_err(format!("config section \"{name}\" must be an object"))),
        }
    }
}

/// Merges, later layers winning: defaults, the file's top-level seed, the
/// file's `section`, the global `--seed` flag, then the non-null fields of
/// the subcommand `flags`.
pub fn resolve<C, F>(file: &ConfigFile, section: &str, flags: &F, seed_flag: Option<u64>) -> anyhow::Result<(C, Value)>
where
    C: Default + Serialize + DeserializeOwned,
    F: Serialize,
{
    let Value::Object(mut merged) = serde_json::to_value(C::default())? else {
        unreachable!("configs serialize to objects")
    };
    let has_seed = merged.contains_key("seed");
    if let (Some(s), true) = (file.seed()?, has_seed) {
        merged.insert("seed".into(), s.into());
    }
    for (k, v) in file.section(section)? {
        if !merged.contains_key(&k) {
            return Err(config_err(format!("unknown key \"{k}\" in config section \"{section}\"")));
        }
        merged.insert(k, v);
    }
    if let (Some(s), true) = (seed_flag, has_seed) {
        merged.insert("seed".into(), s.into());
    }
    if let Value::Object(fl) = serde_json::to_value(flags)? {
        for (k, v) in fl {
            if !v.is_null() && merged.contains_key(&k) {
                merged.insert(k, v);
            }
        }
    }
    let value = Value::Object(merged);
    let config = serde_json::from_value(value.clone()).map_err(|e| config_err(format!("{section}: {e}")))?;
    Ok((config, value))
}
