//! Flat `key = value` configuration text.
//!
//! Dotted keys address nested sections (`model.embed_dim = 128`). Values
//! are read as integers, floats, booleans, `none`, or else strings; quote a
//! value to force a string. Types are then checked against the target
//! struct.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

fn scalar(raw: &str) -> Value {
    let quoted = raw.len() >= 2 && raw.starts_with('"') && raw.ends_with('"');
    if quoted {
        return Value::String(raw[1..raw.len() - 1].to_string());
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        if f.is_finite() {
            return Value::from(f);
        }
    }
    match raw {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        "none" | "null" => Value::Null,
        _ => Value::String(raw.to_string()),
    }
}

/// Parses the text into a JSON object tree.
pub fn parse_kv(text: &str) -> Result<Value> {
    let mut root = Map::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("line {}: bad key {key:?}", n + 1)));
        }
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("line {}: {p} is both a value and a section", n + 1)))?;
        }
        let leaf = parts[parts.len() - 1].to_string();
        if node.contains_key(&leaf) {
            return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
        }
        node.insert(leaf, scalar(raw.trim()));
    }
    Ok(Value::Object(root))
}

/// Parses and type-checks against `C`.
pub fn from_kv<C: DeserializeOwned>(text: &str) -> Result<C> {
    serde_json::from_value(parse_kv(text)?).map_err(|e| Error::Config(e.to_string()))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Null => out.push(format!("{prefix} = none")),
        Value::String(s) => {
            // keep strings that would read back as another type quoted
            if matches!(scalar(s), Value::String(_)) && !s.starts_with('"') && !s.contains('#') && s.trim() == s {
                out.push(format!("{prefix} = {s}"));
            } else {
                out.push(format!("{prefix} = \"{s}\""));
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// Renders `c` as `key = value` lines that [`from_kv`] reads back.
pub fn to_kv<C: Serialize>(c: &C) -> Result<String> {
    let mut lines = Vec::new();
    flatten("", &serde_json::to_value(c)?, &mut lines);
    Ok(lines.join("\n") + "\n")
}
