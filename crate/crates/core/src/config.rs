//! TOML configuration files with dotted-key overrides.
//!
//! An override `a.b.c=value` replaces one entry of the parsed document
//! before it is deserialized. Array elements are addressed by index
//! (`stages.1.epochs=4`). The value is read as a TOML value, falling back to
//! a bare string. Unknown keys are rejected by the target type.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::error::{Error, Result};

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Value, path: &[&str], value: Value, full: &str) -> Result<()> {
    let (head, rest) = path.split_first().ok_or_else(|| Error::Config(format!("empty override key in `{full}`")))?;
    let slot = match root {
        Value::Table(t) => {
            if rest.is_empty() {
                t.insert(head.to_string(), value);
                return Ok(());
            }
            if !t.contains_key(*head) && rest[0].parse::<usize>().is_ok() {
                return Err(Error::Config(format!("`{full}` indexes `{head}`, which the file does not define")));
            }
            t.entry(head.to_string()).or_insert_with(|| Value::Table(Table::new()))
        }
        Value::Array(a) => {
            let i: usize = head.parse().map_err(|_| Error::Config(format!("`{head}` in `{full}` is not an array index")))?;
            let len = a.len();
            let item = a.get_mut(i).ok_or_else(|| Error::Config(format!("index {i} in `{full}` exceeds {len} entries")))?;
            if rest.is_empty() {
                *item = value;
                return Ok(());
            }
            item
        }
        _ => return Err(Error::Config(format!("`{full}` descends into a scalar at `{head}`"))),
    };
    set_path(slot, rest, value, full)
}

/// Applies `key=value` overrides to a parsed document.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        set_path(doc, &path, parse_value(raw.trim()), o)?;
    }
    Ok(())
}

/// Parses TOML text with overrides into `T`.
pub fn from_toml_str<T: DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let mut doc = Value::Table(table);
    apply_overrides(&mut doc, overrides)?;
    doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

/// Reads a TOML file with overrides into `T`.
pub fn load_toml<T: DeserializeOwned>(path: &Path, overrides: &[String]) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_toml_str(&text, overrides).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
