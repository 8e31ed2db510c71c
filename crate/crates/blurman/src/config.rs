//! Flat key-value configuration files.
//!
//! Format: one `key = value` per line, `#` starts a comment, keys may be
//! dotted (`camera.fx`). Values are whitespace-separated scalars so a key
//! can hold a vector (`offset = 0 0.55 0`). CLI `--override key=value`
//! entries map 1:1 onto these keys.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsed configuration: dotted keys to raw value strings, insertion-order
/// independent (sorted map keeps serialization deterministic).
#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Config { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str_contents(&text)
    }

    /// Apply a `key=value` override, replacing or inserting the key.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("override `{spec}` is not key=value")))?;
        self.entries
            .insert(key.trim().to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn string(&self, key: &str) -> Result<String> {
        self.raw(key)
            .map(|s| s.to_string())
            .ok_or_else(|| Error::config(format!("missing key `{key}`")))
    }

    pub fn string_or(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse_scalar(key, self.string(key)?.as_str())
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            Some(v) => self.parse_scalar(key, v),
            None => Ok(default),
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let v = self.string(key)?;
        v.parse::<u64>()
            .map_err(|_| Error::config(format!("key `{key}`: `{v}` is not an integer")))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            Some(v) => v
                .parse::<u64>()
                .map_err(|_| Error::config(format!("key `{key}`: `{v}` is not an integer"))),
            None => Ok(default),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.u64_or(key, default as u64)? as usize)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            Some("true") | Some("1") | Some("on") => Ok(true),
            Some("false") | Some("0") | Some("off") => Ok(false),
            Some(v) => Err(Error::config(format!("key `{key}`: `{v}` is not a bool"))),
            None => Ok(default),
        }
    }

    /// Vector-valued key: whitespace-separated floats.
    pub fn f64s(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.string(key)?;
        v.split_whitespace()
            .map(|tok| self.parse_scalar(key, tok))
            .collect()
    }

    pub fn f64s_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        if self.contains(key) {
            self.f64s(key)
        } else {
            Ok(default.to_vec())
        }
    }

    /// Fixed-arity vector key.
    pub fn vec3(&self, key: &str) -> Result<[f64; 3]> {
        let v = self.f64s(key)?;
        if v.len() != 3 {
            return Err(Error::config(format!(
                "key `{key}`: expected 3 values, got {}",
                v.len()
            )));
        }
        Ok([v[0], v[1], v[2]])
    }

    /// All keys matching `prefix.N` for consecutive N starting at 0.
    pub fn indexed(&self, prefix: &str) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        let mut i = 0;
        loop {
            let key = format!("{prefix}.{i}");
            match self.entries.get(&key) {
                Some(v) => out.push((i, v.clone())),
                None => break,
            }
            i += 1;
        }
        out
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    fn parse_scalar(&self, key: &str, tok: &str) -> Result<f64> {
        tok.parse::<f64>()
            .map_err(|_| Error::config(format!("key `{key}`: `{tok}` is not a number")))
    }
}

impl std::fmt::Display for Config {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scalars_vectors_comments() {
        let cfg = Config::from_str_contents(
            "# a comment\nseed = 7\ncamera.fx = 90.5  # trailing\noffset = 0 0.55 0\n",
        )
        .unwrap();
        assert_eq!(cfg.u64("seed").unwrap(), 7);
        assert_eq!(cfg.f64("camera.fx").unwrap(), 90.5);
        assert_eq!(cfg.vec3("offset").unwrap(), [0.0, 0.55, 0.0]);
    }

    #[test]
    fn missing_key_is_config_error() {
        let cfg = Config::from_str_contents("a = 1\n").unwrap();
        assert!(matches!(cfg.f64("b"), Err(Error::Config(_))));
    }

    #[test]
    fn override_replaces_value() {
        let mut cfg = Config::from_str_contents("seed = 1\n").unwrap();
        cfg.apply_override("seed=9").unwrap();
        assert_eq!(cfg.u64("seed").unwrap(), 9);
        cfg.apply_override("new.key = 2.5").unwrap();
        assert_eq!(cfg.f64("new.key").unwrap(), 2.5);
        assert!(cfg.apply_override("garbage").is_err());
    }

    #[test]
    fn indexed_keys_stop_at_gap() {
        let cfg = Config::from_str_contents("j.0 = a\nj.1 = b\nj.3 = d\n").unwrap();
        let got = cfg.indexed("j");
        assert_eq!(got.len(), 2);
        assert_eq!(got[1].1, "b");
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(Config::from_str_contents("just words\n").is_err());
    }
}
