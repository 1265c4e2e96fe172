//! Flat `key = value` configuration text.
//!
//! Lines are `key = value`; `#` starts a comment. `include = path` splices
//! another file (relative to the including file) at that point, so later
//! keys override earlier ones.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use crate::{Error, Result};

#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    used: Mutex<BTreeSet<String>>,
}

impl Clone for Config {
    fn clone(&self) -> Self {
        Config {
            values: self.values.clone(),
            used: Mutex::new(self.used.lock().unwrap().clone()),
        }
    }
}

impl PartialEq for Config {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

const MAX_INCLUDE_DEPTH: usize = 16;

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Config::new();
        cfg.merge_file(path.as_ref(), &mut Vec::new())?;
        Ok(cfg)
    }

    /// Parses text; includes resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Config::new();
        cfg.merge_text(text, base, Path::new("<text>"), &mut Vec::new())?;
        Ok(cfg)
    }

    fn merge_file(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> Result<()> {
        let canon = path.canonicalize().map_err(|e| Error::io(path, e))?;
        if stack.contains(&canon) {
            return Err(Error::format(path, "include cycle"));
        }
        if stack.len() >= MAX_INCLUDE_DEPTH {
            return Err(Error::format(path, "includes nested too deeply"));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        stack.push(canon);
        let base = path.parent().unwrap_or(Path::new("."));
        self.merge_text(&text, base, path, stack)?;
        stack.pop();
        Ok(())
    }

    fn merge_text(&mut self, text: &str, base: &Path, origin: &Path, stack: &mut Vec<PathBuf>) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::format(origin, format!("line {}: empty key", no + 1)));
            }
            if k == "include" {
                self.merge_file(&base.join(v), stack)?;
            } else {
                self.values.insert(k.to_string(), v.to_string());
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.lock().unwrap().insert(key.to_string());
        self.values.get(key).map(String::as_str)
    }

    /// Parsed value or `default` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|e| Error::Config(format!("{key} = {s:?}: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let s = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))?;
        s.parse().map_err(|e| Error::Config(format!("{key} = {s:?}: {e}")))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| p.parse().map_err(|e| Error::Config(format!("{key} item {p:?}: {e}"))))
                .collect(),
        }
    }

    /// Keys present but never read.
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.lock().unwrap();
        self.values.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Resolved form: includes expanded, keys sorted. Parsing it back yields
/// the same configuration.
impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Comma-joined list, the inverse of [`Config::get_list`].
pub fn join_list<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_overrides() {
        let c = Config::parse("a = 1 # one\n\n# full comment\nb = x, y ,z\na = 2\n", Path::new(".")).unwrap();
        assert_eq!(c.get("a", 0).unwrap(), 2);
        assert_eq!(c.get_list::<String>("b", vec![]).unwrap(), ["x", "y", "z"]);
        assert_eq!(c.get("missing", 7.5).unwrap(), 7.5);
        assert!(c.require::<u32>("missing").is_err());
        assert!(c.get::<u32>("b", 0).is_err());
        assert!(Config::parse("novalue\n", Path::new(".")).is_err());
    }

    #[test]
    fn includes_resolve_relative_and_detect_cycles() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/base.cfg"), "lr = 0.1\nseed = 3\n").unwrap();
        std::fs::write(dir.path().join("main.cfg"), "include = sub/base.cfg\nlr = 0.5\n").unwrap();
        let c = Config::load(dir.path().join("main.cfg")).unwrap();
        assert_eq!(c.get("lr", 0.0).unwrap(), 0.5);
        assert_eq!(c.get("seed", 0u64).unwrap(), 3);
        assert!(c.unused().is_empty());

        let round = Config::parse(&c.to_string(), dir.path()).unwrap();
        assert_eq!(round, c);

        std::fs::write(dir.path().join("x.cfg"), "include = y.cfg\n").unwrap();
        std::fs::write(dir.path().join("y.cfg"), "include = x.cfg\n").unwrap();
        let err = Config::load(dir.path().join("x.cfg")).unwrap_err().to_string();
        assert!(err.contains("cycle"), "{err}");
    }

    #[test]
    fn reports_unused_keys() {
        let c = Config::parse("a = 1\ntypo = 2\n", Path::new(".")).unwrap();
        c.get("a", 0).unwrap();
        assert_eq!(c.unused(), ["typo"]);
    }
}
