use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use mvp_core::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("invalid configuration: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    /// 2 usage, 3 data/config mismatch, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_) | Error::UnknownProtocol(_) => 2,
                Error::TrainingAborted(_) | Error::NonFinite(_) => 4,
                _ => 3,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `KEY=VALUE`; the value is read as JSON when it parses, else as a string.
fn parse_override(s: &str) -> CliResult<(Vec<String>, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
    if k.is_empty() {
        return Err(usage(format!("--set has an empty key in {s:?}")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.split('.').map(str::to_string).collect(), value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> bool {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let Some(obj) = cur.as_object_mut() else { return false };
        if i + 1 == path.len() {
            if !obj.contains_key(key) {
                return false;
            }
            obj.insert(key.clone(), value);
            return true;
        }
        let Some(next) = obj.get_mut(key) else { return false };
        cur = next;
    }
    false
}

/// Applies `--set` overrides to `root`. A dotted key names a nested field;
/// a bare key applies to every listed section that has it.
pub fn apply_overrides(root: &mut Value, overrides: &[String], sections: &[&str]) -> CliResult<()> {
    for o in overrides {
        let (path, value) = parse_override(o)?;
        let mut hit = set_path(root, &path, value.clone());
        if !hit && path.len() == 1 {
            for s in sections {
                let full = vec![s.to_string(), path[0].clone()];
                hit |= set_path(root, &full, value.clone());
            }
        }
        if !hit {
            return Err(usage(format!("unknown config key {:?}", path.join("."))));
        }
    }
    Ok(())
}

/// Merges `patch` into `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) -> CliResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v)?,
                    Some(slot) => *slot = v,
                    None => return Err(usage(format!("unknown config key {k:?}"))),
                }
            }
            Ok(())
        }
        (_, p) => Err(usage(format!("config file must hold a JSON object, got {p}"))),
    }
}

/// Defaults, then the config file, then `--set` overrides.
pub fn layered<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    overrides: &[String],
    sections: &[&str],
) -> CliResult<T> {
    let mut v = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Core(Error::io(path, e)))?;
        merge(&mut v, serde_json::from_str(&text)?)?;
    }
    apply_overrides(&mut v, overrides, sections)?;
    Ok(serde_json::from_value(v)?)
}

/// True when `key` (bare or dotted) is set by the file or an override.
pub fn explicitly_set(file: Option<&Path>, overrides: &[String], section: &str, key: &str) -> CliResult<bool> {
    let dotted = format!("{section}.{key}");
    if overrides
        .iter()
        .filter_map(|o| o.split_once('='))
        .any(|(k, _)| k == key || k == dotted)
    {
        return Ok(true);
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Core(Error::io(path, e)))?;
        let v: Value = serde_json::from_str(&text)?;
        return Ok(v.get(section).and_then(|s| s.get(key)).is_some());
    }
    Ok(false)
}

/// Creates `dir`, refusing a non-empty one unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(usage(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| CliError::Core(Error::io(dir, e)))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::io(dir, e)))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Core(Error::io(path, e)))?;
    Ok(())
}

/// Writes `provenance.json`: command line, resolved config and its hash,
/// seed and format versions.
pub fn write_provenance(dir: &Path, argv: &[String], command: &str, config: &impl Serialize, seed: u64) -> CliResult<()> {
    let config = serde_json::to_value(config)?;
    let hash = hex::encode(Sha256::digest(serde_json::to_vec(&config)?));
    let mut versions = Map::new();
    versions.insert("mvp".into(), json!(env!("CARGO_PKG_VERSION")));
    versions.insert("dataset".into(), json!(mvp_core::scenes::GENERATOR_VERSION));
    versions.insert("checkpoint".into(), json!(mvp_core::model::CHECKPOINT_VERSION));
    let record = json!({
        "command": command,
        "argv": argv,
        "seed": seed,
        "config_hash": hash,
        "config": config,
        "versions": versions,
    });
    write_json(&dir.join("provenance.json"), &record)
}
