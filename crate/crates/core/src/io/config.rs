//! Line-oriented `key = value` files with `[section]` headers.
//!
//! `#` and `;` start comments. Keys before the first header belong to the
//! unnamed section `""`. A repeated key overwrites the earlier value.
//! [`Config::to_text`] is canonical, so print and parse form a fixpoint.

use std::fmt::Display;
use std::str::FromStr;

use super::IoError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut cfg = Config::new();
        let mut current = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    IoError::Malformed(format!("line {}: unclosed section header", n + 1))
                })?;
                current = name.trim().to_string();
                cfg.section_mut(&current);
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                IoError::Malformed(format!("line {}: expected `key = value`", n + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(IoError::Malformed(format!("line {}: empty key", n + 1)));
            }
            cfg.set(&current, k, v.trim());
        }
        Ok(cfg)
    }

    fn section_mut(&mut self, name: &str) -> &mut Vec<(String, String)> {
        let idx = match self.sections.iter().position(|(s, _)| s == name) {
            Some(i) => i,
            None => {
                self.sections.push((name.to_string(), Vec::new()));
                self.sections.len() - 1
            }
        };
        &mut self.sections[idx].1
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Display) {
        let value = value.to_string();
        let entries = self.section_mut(section);
        match entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.section(section)?
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn section(&self, name: &str) -> Option<&[(String, String)]> {
        self.sections
            .iter()
            .find(|(s, _)| s == name)
            .map(|(_, e)| e.as_slice())
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(s, _)| s.as_str())
    }

    /// Parses a value if present.
    pub fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, IoError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| IoError::Malformed(format!("[{section}] {key}: cannot parse `{v}`"))),
        }
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T, IoError> {
        self.parsed(section, key)?
            .ok_or_else(|| IoError::Malformed(format!("[{section}] {key} is missing")))
    }

    /// Whitespace-separated list.
    pub fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>, IoError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| {
                        IoError::Malformed(format!("[{section}] {key}: cannot parse `{t}`"))
                    })
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let ordered = self
            .sections
            .iter()
            .filter(|(s, _)| s.is_empty())
            .chain(self.sections.iter().filter(|(s, _)| !s.is_empty()));
        for (name, entries) in ordered {
            if !name.is_empty() {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{name}]\n"));
            }
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

/// Space-joined list for [`Config::set`].
pub fn join<T: Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}
