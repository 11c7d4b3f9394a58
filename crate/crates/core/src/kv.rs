//! Line-oriented `key=value` text files.
//!
//! The format carries network manifests, calibration tables and run
//! configurations: one `key=value` pair per line, `#` comments and blank
//! lines ignored, insertion order preserved so emitted files diff cleanly.
//! Repeated keys are allowed (used for lists such as target units).

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format_at_line(path, idx + 1, format!("expected key=value, got '{raw}'"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::format_at_line(path, idx + 1, "empty key"));
            }
            entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    /// Last value for a key, or None. Last-wins makes later lines override
    /// earlier ones, mirroring how flags override config files.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// All values recorded for a key, in file order.
    pub fn get_all(&self, key: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn require(&self, key: &str, path: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(path, format!("missing required key '{key}'")))
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str, path: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::format(path, format!("key '{key}': cannot parse value '{raw}'"))
            }),
        }
    }

    pub fn require_parsed<T: FromStr>(&self, key: &str, path: &str) -> Result<T> {
        let raw = self.require(key, path)?;
        raw.parse::<T>()
            .map_err(|_| Error::format(path, format!("key '{key}': cannot parse value '{raw}'")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> {
        self.entries
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.as_str())
    }
}
