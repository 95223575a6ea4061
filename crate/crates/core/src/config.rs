//! Flat `key = value` text files. `#` starts a comment; blank lines are
//! ignored; every key may appear once.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, SpilError};

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    source: PathBuf,
    entries: Vec<(String, String)>,
    used: Vec<bool>,
}

impl KeyValues {
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SpilError::parse(source, format!("line {}: expected 'key = value'", n + 1)))?;
            let key = k.trim().to_string();
            if entries.iter().any(|(e, _)| *e == key) {
                return Err(SpilError::parse(source, format!("line {}: duplicate key '{key}'", n + 1)));
            }
            entries.push((key, v.trim().to_string()));
        }
        let used = vec![false; entries.len()];
        Ok(Self {
            source: source.to_path_buf(),
            entries,
            used,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SpilError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn raw(&mut self, key: &str) -> Option<&str> {
        let i = self.entries.iter().position(|(k, _)| k == key)?;
        self.used[i] = true;
        Some(self.entries[i].1.as_str())
    }

    /// Parses `key` when present, leaving `slot` untouched otherwise.
    pub fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.raw(key).map(str::to_string) {
            *slot = v
                .parse()
                .map_err(|_| SpilError::parse(&self.source, format!("field '{key}': cannot parse '{v}'")))?;
        }
        Ok(())
    }

    /// Whitespace- or comma-separated list.
    pub fn set_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some(v) = self.raw(key).map(str::to_string) {
            *slot = v
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| SpilError::parse(&self.source, format!("field '{key}': cannot parse '{v}'")))?;
        }
        Ok(())
    }

    /// Errors on the first key never read.
    pub fn finish(&self) -> Result<()> {
        match self.used.iter().position(|u| !u) {
            Some(i) => Err(SpilError::parse(
                &self.source,
                format!("unknown field '{}'", self.entries[i].0),
            )),
            None => Ok(()),
        }
    }

    pub fn source(&self) -> &Path {
        &self.source
    }
}
