//! Layered run configuration: defaults, then a JSON file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Overlays `patch` onto `base`. Keys absent from `base` are rejected so a
/// typo in a config file fails loudly instead of being ignored.
pub fn merge(base: &mut Value, patch: &Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!("unknown config key '{here}'"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// `defaults` overlaid with the file at `path` (if any).
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, path: Option<&Path>) -> Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(path) = path {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        let patch: Value =
            serde_json::from_str(&text).with_context(|| format!("config file {} is not valid JSON", path.display()))?;
        merge(&mut value, &patch, "").with_context(|| format!("in config file {}", path.display()))?;
    }
    serde_json::from_value(value).context("config does not match the expected schema")
}
