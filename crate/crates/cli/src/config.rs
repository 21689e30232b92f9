//! Flag resolution: command line, then `JND_*` environment variables (both
//! handled by clap), then the JSON config file, then built-in defaults.
//!
//! The config file mirrors the flags. Top-level keys apply to every
//! subcommand that has such a flag; a section named after the subcommand
//! overrides them:
//!
//! ```json
//! { "seed": 3, "train": { "epochs": 10, "mode": "lin" } }
//! ```

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub fn load(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    anyhow::ensure!(
        value.is_object(),
        "config {} is not a JSON object",
        path.display()
    );
    Ok(value)
}

fn lookup<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key)
        .or_else(|| obj.get(&key.replace('-', "_")))
        .filter(|v| !v.is_null())
}

/// Fills every flag left unset on the command line from the config file.
/// `args` must serialize unset flags as `null` with kebab-case keys.
pub fn merge<T: Serialize + DeserializeOwned>(args: T, config: &Value, section: &str) -> Result<T> {
    let mut value = serde_json::to_value(&args)?;
    let (Some(flags), Some(file)) = (value.as_object_mut(), config.as_object()) else {
        return Ok(args);
    };
    let scoped = file.get(section).and_then(Value::as_object);
    for (key, v) in flags.iter_mut() {
        if !v.is_null() {
            continue;
        }
        if let Some(found) = scoped
            .and_then(|s| lookup(s, key))
            .or_else(|| lookup(file, key))
        {
            *v = found.clone();
        }
    }
    serde_json::from_value(value).with_context(|| format!("config values for `{section}`"))
}
