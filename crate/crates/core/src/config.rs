//! Key = value configuration text.
//!
//! One `key = value` pair per line, `#` starts a comment, blank lines are
//! skipped. Keys keep insertion order so serialized output is stable, which
//! the checkpoint header relies on.

use indexmap::IndexMap;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line_no}: expected 'key = value', got '{line}'")]
    Syntax { line_no: usize, line: String },
    #[error("duplicate key '{key}'")]
    Duplicate { key: String },
    #[error("key '{key}': cannot parse '{value}' as {expected}")]
    Invalid {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("missing required key '{key}'")]
    Missing { key: String },
    #[error("unknown key '{key}'")]
    Unknown { key: String },
}

/// Ordered string-to-string map with typed accessors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: IndexMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = KvMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line_no: i + 1,
                line: line.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line_no: i + 1,
                    line: line.to_string(),
                });
            }
            if map.entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError::Duplicate { key: key.to_string() });
            }
        }
        Ok(map)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Later entries win; insertion order of fresh keys is preserved.
    pub fn merge_from(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Parses the value under `key`, `Ok(None)` when absent.
    pub fn get_parsed<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::Invalid {
                key: key.to_string(),
                value: v.clone(),
                expected,
            }),
        }
    }

    pub fn require<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        self.get_parsed(key, expected)?
            .ok_or_else(|| ConfigError::Missing { key: key.to_string() })
    }

    /// Errors unless every key is in `known`; catches typos in config files.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<(), ConfigError> {
        for k in self.entries.keys() {
            if !known.contains(&k.as_str()) {
                return Err(ConfigError::Unknown { key: k.clone() });
            }
        }
        Ok(())
    }
}
