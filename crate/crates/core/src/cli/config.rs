//! Flat `key = value` configuration.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored; keys
//! are lower-case identifiers; a repeated key is an error. Lists are
//! comma-separated. Command-line flags override file entries.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", lineno + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(Error::Config {
                    key: k.to_string(),
                    msg: format!("invalid key on line {}", lineno + 1),
                });
            }
            if cfg.entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config {
                    key: k.to_string(),
                    msg: format!("duplicate key on line {}", lineno + 1),
                });
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !valid_key(key) {
            return Err(Error::Config {
                key: key.to_string(),
                msg: "invalid key".into(),
            });
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_keys(&self, command: &str, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Config {
                key: k.to_string(),
                msg: format!("not a `{command}` setting (expected one of: {})", allowed.join(", ")),
            }),
            None => Ok(()),
        }
    }

    pub fn value<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => parse_one(key, v),
        }
    }

    pub fn list<T: FromStr + Clone>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some("") => Ok(Vec::new()),
            Some(v) => v.split(',').map(|item| parse_one(key, item.trim())).collect(),
        }
    }

    /// Positive integer setting.
    pub fn positive(&self, key: &str, default: u64) -> Result<u64> {
        let v: u64 = self.value(key, default)?;
        if v == 0 {
            return Err(Error::Config {
                key: key.to_string(),
                msg: "must be positive".into(),
            });
        }
        Ok(v)
    }

    pub fn positive_list(&self, key: &str, default: &[u64]) -> Result<Vec<u64>> {
        let v: Vec<u64> = self.list(key, default)?;
        if v.contains(&0) {
            return Err(Error::Config {
                key: key.to_string(),
                msg: "values must be positive".into(),
            });
        }
        Ok(v)
    }
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| Error::Config {
        key: key.to_string(),
        msg: format!("cannot parse `{v}`: {e}"),
    })
}

/// Canonical form: sorted keys, one `key = value` per line.
impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
