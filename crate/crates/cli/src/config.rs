//! Layered configuration: built-in defaults, then a JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

fn overlay(base: &mut Map<String, Value>, top: Map<String, Value>) {
    for (k, v) in top {
        if !v.is_null() {
            base.insert(k, v);
        }
    }
}

/// Resolves `T` from its defaults, the optional config file and the flag values
/// (`null` flags are treated as absent).
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, flags: Value) -> Result<T, CliError> {
    let Value::Object(mut merged) = serde_json::to_value(T::default()).map_err(CliError::usage)? else {
        unreachable!("configs serialize to objects")
    };
    if let Some(path) = file {
        if !path.exists() {
            return Err(CliError::usage(format!("{} does not exist", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(m)) => overlay(&mut merged, m),
            Ok(_) => return Err(CliError::usage(format!("{}: config must be a JSON object", path.display()))),
            Err(e) => return Err(CliError::usage(format!("{}: {e}", path.display()))),
        }
    }
    if let Value::Object(m) = flags {
        overlay(&mut merged, m);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::usage(format!("config: {e}")))
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Echoes the resolved config next to `out`.
pub fn write_sidecar<T: Serialize>(out: &Path, config: &T) -> Result<(), CliError> {
    let path = sidecar_path(out);
    let mut text = serde_json::to_string_pretty(config).map_err(CliError::usage)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}
