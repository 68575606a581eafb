//! Flag values layered over an optional JSON config file.

use std::fmt;
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Bad or missing arguments. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Reads a config object. A run manifest is accepted too, in which case its
/// recorded config is used.
fn load(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let value = match value {
        Value::Object(mut m) if m.contains_key("subcommand") && m.contains_key("config") => m.remove("config").expect("checked"),
        v => v,
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(usage(format!("config {} must hold a JSON object", path.display()))),
    }
}

/// Flags win over the config file. Unset options, `false` switches and
/// empty lists count as not given.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> anyhow::Result<T> {
    let mut merged = match config {
        Some(p) => load(p)?,
        None => Map::new(),
    };
    let Value::Object(given) = serde_json::to_value(flags)? else {
        unreachable!("argument structs serialize to objects")
    };
    for (k, v) in given {
        let unset = match &v {
            Value::Null | Value::Bool(false) => true,
            Value::Array(a) => a.is_empty(),
            _ => false,
        };
        if !unset {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config: {e}")))
}

pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> anyhow::Result<T> {
    value.clone().ok_or_else(|| usage(format!("missing --{flag} (give it as a flag or in --config)")))
}
