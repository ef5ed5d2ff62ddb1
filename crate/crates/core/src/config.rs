//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every typed read is
//! recorded so that [`KvConfig::finish`] can reject keys nobody consumed, and
//! so the resolved configuration (defaults included) can be written back out.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
    consumed: RefCell<BTreeSet<String>>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            if values.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { values, ..Self::default() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Typed read with a default; the effective value is recorded.
    pub fn get<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.consumed.borrow_mut().insert(key.to_string());
        let value = match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| Error::config(format!("key `{key}` = `{raw}`: {e}")))?,
            None => default,
        };
        self.resolved.borrow_mut().insert(key.to_string(), value.to_string());
        Ok(value)
    }

    pub fn get_opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.consumed.borrow_mut().insert(key.to_string());
        let Some(raw) = self.values.get(key) else { return Ok(None) };
        let value = raw
            .parse::<T>()
            .map_err(|e| Error::config(format!("key `{key}` = `{raw}`: {e}")))?;
        self.resolved.borrow_mut().insert(key.to_string(), value.to_string());
        Ok(Some(value))
    }

    /// Comma-separated list.
    pub fn get_list<T>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: FromStr + Display + Clone,
        T::Err: Display,
    {
        self.consumed.borrow_mut().insert(key.to_string());
        let out = match self.values.get(key) {
            Some(raw) if raw.trim().is_empty() => Vec::new(),
            Some(raw) => raw
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<T>()
                        .map_err(|e| Error::config(format!("key `{key}` item `{t}`: {e}")))
                })
                .collect::<Result<Vec<T>>>()?,
            None => default.to_vec(),
        };
        let joined = out.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        self.resolved.borrow_mut().insert(key.to_string(), joined);
        Ok(out)
    }

    /// Errors on any key that was never read.
    pub fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&str> =
            self.values.keys().filter(|k| !consumed.contains(*k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    /// Every key read so far with its effective value, one `key=value` per line.
    pub fn resolved_text(&self) -> String {
        self.resolved.borrow().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_tracks_keys() {
        let kv = KvConfig::parse("# comment\n a = 3\nb=x\n\nlist = 1, 2,3\n").unwrap();
        assert_eq!(kv.get("a", 0usize).unwrap(), 3);
        assert_eq!(kv.get("missing", 1.5f64).unwrap(), 1.5);
        assert_eq!(kv.get_list::<u32>("list", &[]).unwrap(), vec![1, 2, 3]);
        assert!(kv.finish().is_err());
        assert_eq!(kv.get("b", String::new()).unwrap(), "x");
        kv.finish().unwrap();
        assert_eq!(kv.resolved_text(), "a=3\nb=x\nlist=1,2,3\nmissing=1.5\n");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvConfig::parse("novalue").is_err());
        assert!(KvConfig::parse("a=1\na=2").is_err());
        let kv = KvConfig::parse("a=notanumber").unwrap();
        assert!(kv.get("a", 0u32).is_err());
    }
}
