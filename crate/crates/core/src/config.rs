//! Flat `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key/value pairs. Keys are consumed as components read them so
/// that leftovers can be reported as unknown.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got {raw:?}") })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse { line: i + 1, msg: format!("duplicate key {key}") });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Remove and parse `key`, leaving `target` untouched when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *target = raw.parse().map_err(|e| Error::config(format!("{key} = {raw:?}: {e}")))?;
        }
        Ok(())
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Error out on any key no component claimed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<_> = self.entries.keys().cloned().collect();
            Err(Error::config(format!("unknown keys: {}", keys.join(", "))))
        }
    }
}

/// Accumulates `key = value` lines for snapshot files.
#[derive(Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section(&mut self, title: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        self.out.push_str(&format!("# {title}\n"));
        self
    }

    pub fn kv(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_reports_unknown_keys() {
        let mut kv = KvConfig::parse("# header\nwindow_length = 20  # inline\n\nseed=7\n").unwrap();
        let mut w = 50usize;
        let mut s = 42u64;
        let mut missing = 1.5f64;
        kv.take("window_length", &mut w).unwrap();
        kv.take("seed", &mut s).unwrap();
        kv.take("absent", &mut missing).unwrap();
        assert_eq!((w, s, missing), (20, 7, 1.5));
        kv.finish().unwrap();

        let kv = KvConfig::parse("bogus = 1").unwrap();
        assert!(matches!(kv.finish(), Err(Error::Config(_))));
        assert!(matches!(KvConfig::parse("a = 1\nno equals\n"), Err(Error::Parse { line: 2, .. })));
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
        let mut kv = KvConfig::parse("n = abc").unwrap();
        let mut n = 0usize;
        assert!(kv.take("n", &mut n).is_err());
    }
}
