//! `key = value` configuration files.

use crate::error::{Error, Result};

/// Pairs in file order with their 1-based line numbers. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, (String, String))>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, (k.to_string(), v.trim().to_string())));
    }
    Ok(out)
}
