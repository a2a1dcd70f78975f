//! Flat `section.key: value` configuration text.
//!
//! ```text
//! # comment
//! schedule.linear_end: 0.012
//! train.mode: offset
//! train.k: 0
//! ```
//!
//! Later assignments override earlier ones, so command-line overrides are
//! applied by [`KvConfig::set`] after the file is parsed.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| {
                Error::format(origin, format!("line {}: expected `key: value`", i + 1))
            })?;
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::format(origin, format!("line {}: bad key `{key}`", i + 1)));
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("`{key}` has invalid value `{raw}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Config(format!("`{key}` has invalid item `{s}`")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Copies every entry of `other`, replacing existing keys.
    pub fn merge(&mut self, other: KvConfig) {
        self.entries.extend(other.entries);
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{pair}`")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Canonical `key: value` text, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}: {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_lists() {
        let text = "# header\ntrain.k: 2\nschedule.ends: 0.012, 0.02\n\ntrain.k: 3  # later wins\n";
        let mut c = KvConfig::parse(text, Path::new("x")).unwrap();
        assert_eq!(c.get::<usize>("train.k").unwrap(), Some(3));
        assert_eq!(
            c.get_list::<f64>("schedule.ends").unwrap(),
            Some(vec![0.012, 0.02])
        );
        c.set("train.k", 0);
        assert_eq!(c.get_or("train.k", 9usize).unwrap(), 0);
        assert_eq!(c.get_or("missing", 9usize).unwrap(), 9);
        assert!(c.get::<f64>("schedule.ends").is_err());
        assert_eq!(c.to_text(), "schedule.ends: 0.012, 0.02\ntrain.k: 0\n");
        let mut base = KvConfig::parse("train.k: 1\ntrain.iters: 5\n", Path::new("y")).unwrap();
        base.merge(c);
        base.apply_override("train.iters = 7").unwrap();
        assert_eq!(base.get_str("train.k"), Some("0"));
        assert_eq!(base.get_str("train.iters"), Some("7"));
        assert!(base.apply_override("oops").is_err());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvConfig::parse("novalue\n", Path::new("x")).is_err());
        assert!(KvConfig::parse("bad key: 1\n", Path::new("x")).is_err());
    }
}
