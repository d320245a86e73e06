//! Flat `key = value` experiment configuration with typed access.
//!
//! Values come from an optional config file plus `key=value` command-line
//! overrides (overrides win). Every key must be consumed by the command
//! schema; leftovers are fatal, so a misspelled key can never silently fall
//! back to a default.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use diffvar_core::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", p.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let stripped = match line.find('#') {
                    Some(pos) => &line[..pos],
                    None => line,
                };
                let stripped = stripped.trim();
                if stripped.is_empty() {
                    continue;
                }
                let (key, value) = stripped.split_once('=').ok_or_else(|| {
                    Error::invalid(format!(
                        "config line {} is not `key = value`: {line:?}",
                        lineno + 1
                    ))
                })?;
                entries.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        for ov in overrides {
            let (key, value) = ov.split_once('=').ok_or_else(|| {
                Error::invalid(format!("override {ov:?} is not `key=value`"))
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(RawConfig { entries })
    }

    /// FNV-1a over the canonical `key=value` lines; stable across reruns.
    pub fn hash(&self, command: &str) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        feed(command.as_bytes());
        for (k, v) in &self.entries {
            feed(b"\n");
            feed(k.as_bytes());
            feed(b"=");
            feed(v.as_bytes());
        }
        format!("{h:016x}")
    }

    pub fn reader(&self) -> ConfigReader<'_> {
        ConfigReader {
            raw: self,
            consumed: RefCell::new(BTreeSet::new()),
        }
    }
}

/// Typed view that records which keys a command consumed.
pub struct ConfigReader<'a> {
    raw: &'a RawConfig,
    consumed: RefCell<BTreeSet<String>>,
}

impl ConfigReader<'_> {
    fn raw_get(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().insert(key.to_string());
        self.raw.entries.get(key).map(|s| s.as_str())
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.raw_get(key).unwrap_or(default).to_string()
    }

    pub fn get_opt_str(&self, key: &str) -> Option<String> {
        self.raw_get(key).map(|s| s.to_string())
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw_get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::invalid(format!("key {key}: expected an integer, got {v:?}"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw_get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::invalid(format!("key {key}: expected an integer, got {v:?}"))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw_get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::invalid(format!("key {key}: expected a number, got {v:?}"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw_get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::invalid(format!(
                "key {key}: expected true or false, got {v:?}"
            ))),
        }
    }

    /// Fails on any key the command never consumed.
    pub fn finish(self) -> Result<()> {
        let consumed = self.consumed.into_inner();
        let unknown: Vec<&String> = self
            .raw
            .entries
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_comments_are_stripped() {
        let dir = std::env::temp_dir().join("diffvar-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.cfg");
        std::fs::write(&path, "# header\nn_steps = 8 # trailing\nseed = 3\n").unwrap();
        let cfg = RawConfig::load(Some(&path), &["seed=5".to_string()]).unwrap();
        let r = cfg.reader();
        assert_eq!(r.get_usize("n_steps", 0).unwrap(), 8);
        assert_eq!(r.get_u64("seed", 0).unwrap(), 5);
        r.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let cfg = RawConfig::load(None, &["n_stepz=8".to_string()]).unwrap();
        let r = cfg.reader();
        let _ = r.get_usize("n_steps", 4);
        assert!(r.finish().is_err());
    }

    #[test]
    fn hash_is_order_independent_and_value_sensitive() {
        let a = RawConfig::load(None, &["x=1".into(), "y=2".into()]).unwrap();
        let b = RawConfig::load(None, &["y=2".into(), "x=1".into()]).unwrap();
        let c = RawConfig::load(None, &["y=3".into(), "x=1".into()]).unwrap();
        assert_eq!(a.hash("estimate"), b.hash("estimate"));
        assert_ne!(a.hash("estimate"), c.hash("estimate"));
        assert_ne!(a.hash("estimate"), a.hash("verify"));
    }
}
