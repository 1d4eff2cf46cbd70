//! Flat `key = value` configuration with `[section]` headers.
//!
//! Keys before any header live in the unnamed root section. `#` and `;`
//! start comment lines. Overrides use `section.key=value`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unterminated section header", n + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    n + 1
                ))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            cfg.set(&section, key, v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.into());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    /// Parsed value, or `None` when absent.
    pub fn parse_key<V: FromStr>(&self, section: &str, key: &str) -> Result<Option<V>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|_| {
                Error::Config(format!("{}: cannot parse {s:?}", qualified(section, key)))
            }),
        }
    }

    pub fn get_or<V: FromStr>(&self, section: &str, key: &str, default: V) -> Result<V> {
        Ok(self.parse_key(section, key)?.unwrap_or(default))
    }

    /// Applies one `section.key=value` (or `key=value`) override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        let (section, key) = path.trim().rsplit_once('.').unwrap_or(("", path.trim()));
        if key.is_empty() {
            return Err(Error::Config(format!("override {spec:?} has an empty key")));
        }
        self.set(section, key, value.trim());
        Ok(())
    }

    /// Values of `other` win.
    pub fn merge(&mut self, other: &Config) {
        for (s, kv) in &other.sections {
            for (k, v) in kv {
                self.set(s, k, v.clone());
            }
        }
    }

    pub fn section(&self, name: &str) -> Option<&BTreeMap<String, String>> {
        self.sections.get(name)
    }

    /// Canonical text form: root keys first, sections sorted, keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(root) = self.sections.get("") {
            for (k, v) in root {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        for (name, kv) in self.sections.iter().filter(|(n, _)| !n.is_empty()) {
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}
