//! Config resolution (defaults < JSON file < flags) and run manifests.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

pub const MANIFEST_FORMAT: &str = "pld-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Flag overrides collected as a JSON object keyed by dotted paths.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, path: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            let v = serde_json::to_value(v).expect("flag values serialize");
            let mut parts = path.split('.').peekable();
            let mut node = &mut self.0;
            while let Some(part) = parts.next() {
                if parts.peek().is_none() {
                    node.insert(part.to_string(), v);
                    break;
                }
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("override paths do not collide");
            }
        }
        self
    }

    pub fn flag(&mut self, path: &str, on: bool, value: bool) -> &mut Self {
        self.set(path, on.then_some(value))
    }
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads a JSON config file. A run manifest is accepted too, in which case
/// its `config` object is used.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("config {} is not valid JSON: {e}", path.display())))?;
    Ok(match v {
        Value::Object(mut m) if m.get("format") == Some(&Value::from(MANIFEST_FORMAT)) => {
            m.remove("config").unwrap_or(Value::Object(Map::new()))
        }
        other => other,
    })
}

/// Defaults, overlaid by the config file, overlaid by flags.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(
    config: Option<&Path>,
    overrides: Overrides,
) -> Result<T> {
    let mut v = serde_json::to_value(T::default())?;
    if let Some(path) = config {
        merge(&mut v, read_config_file(path)?);
    }
    merge(&mut v, Value::Object(overrides.0));
    serde_json::from_value(v).map_err(|e| UsageError(format!("invalid configuration: {e}")).into())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    /// Fully resolved configuration; enough to re-execute the run.
    pub config: Value,
    /// Results worth keeping next to the artifacts (losses, statistics).
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub results: Value,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Wall-clock time lives next to the manifest so that the manifest itself
/// stays byte-identical across reruns.
pub fn timing_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("timing.json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_manifest<C: Serialize>(
    path: &Path,
    command: &str,
    config: &C,
    results: Value,
    seconds: Option<f64>,
) -> Result<()> {
    let m = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        command: command.into(),
        config: serde_json::to_value(config)?,
        results,
    };
    write_json(path, &m)?;
    match seconds {
        Some(s) => write_json(&timing_path(path), &serde_json::json!({ "wall_seconds": s })),
        None => Ok(()),
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read manifest {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("{} is not a run manifest: {e}", path.display())))?;
    if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
        return Err(UsageError(format!(
            "{}: unsupported manifest {} v{}",
            path.display(),
            m.format,
            m.version
        ))
        .into());
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Inner {
        a: u32,
        b: f64,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Outer {
        x: u32,
        inner: Inner,
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"x": 3, "inner": {"a": 5, "b": 1.5}}"#).unwrap();
        let mut o = Overrides::default();
        o.set("inner.a", Some(9u32)).set("inner.b", None::<f64>);
        let r: Outer = resolve(Some(&path), o).unwrap();
        assert_eq!(
            r,
            Outer {
                x: 3,
                inner: Inner { a: 9, b: 1.5 }
            }
        );
        let d: Outer = resolve(None, Overrides::default()).unwrap();
        assert_eq!(d, Outer::default());
    }

    #[test]
    fn manifest_config_is_accepted_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        write_manifest(&path, "x", &Outer { x: 7, ..Default::default() }, Value::Null, Some(0.1)).unwrap();
        let r: Outer = resolve(Some(&path), Overrides::default()).unwrap();
        assert_eq!(r.x, 7);
        assert!(timing_path(&path).exists());
    }
}
