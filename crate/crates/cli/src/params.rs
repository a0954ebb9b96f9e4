//! Merging `--config` JSON with command-line flags.
//!
//! Config keys are the long flag names with `-` replaced by `_`. Flags given
//! on the command line win over the config file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

fn read_config(path: &Path) -> Result<Map<String, Value>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|_| Failure::MissingInput(path.to_path_buf()))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Failure::Usage(format!("config {}: expected a JSON object", path.display()))),
        Err(e) => Err(Failure::Usage(format!("config {}: {e}", path.display()))),
    }
}

/// Overlays the flags in `cli` on the config file (if any) and returns the
/// merged arguments.
pub fn resolve<T>(cli: &T, config: Option<&PathBuf>) -> Result<T, Failure>
where
    T: Serialize + DeserializeOwned,
{
    let Some(path) = config else {
        return clone_via_json(cli);
    };
    let mut merged = read_config(path)?;
    let Value::Object(flags) = serde_json::to_value(cli).map_err(|e| Failure::Usage(e.to_string()))? else {
        unreachable!("argument structs serialize to objects");
    };
    for (k, v) in flags {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    let known = known_keys(cli)?;
    let unknown: Vec<&String> = merged.keys().filter(|k| !known.contains(*k)).collect();
    if !unknown.is_empty() {
        return Err(Failure::Usage(format!(
            "config {}: unknown keys {:?}",
            path.display(),
            unknown
        )));
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

fn clone_via_json<T: Serialize + DeserializeOwned>(v: &T) -> Result<T, Failure> {
    serde_json::to_value(v)
        .and_then(serde_json::from_value)
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn known_keys<T: Serialize>(v: &T) -> Result<Vec<String>, Failure> {
    match serde_json::to_value(v).map_err(|e| Failure::Usage(e.to_string()))? {
        Value::Object(m) => Ok(m.keys().cloned().collect()),
        _ => Ok(Vec::new()),
    }
}
