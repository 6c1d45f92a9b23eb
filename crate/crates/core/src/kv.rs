//! `key=value` configuration files.

use std::path::Path;

use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
/// Returns `(line number, key, value)` in file order.
pub fn parse(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, format!("expected key=value, got {line:?}")))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::parse(path, i + 1, "empty key"));
        }
        out.push((i + 1, key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

/// Parses one value, naming the key on failure.
pub fn value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

pub fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {raw:?} for {key}"))),
    }
}
