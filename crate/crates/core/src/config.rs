//! Plain-text `key=value` configuration with a fixed schema.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are rejected.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

/// Parses one typed value, naming the key on failure.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}={value}: {e}")))
}

/// Every key the command line understands, with its default.
pub const SCHEMA: &[(&str, &str)] = &[
    ("seed", "1"),
    ("threads", "0"),
    // corpus
    ("vocab_size", "10000"),
    ("max_tokens", "50"),
    ("date_rule", "true"),
    // mining
    ("lsh_bands", "32"),
    ("lsh_rows", "4"),
    ("mine_seeds", "1000"),
    ("mine_budget", "100000"),
    // model
    ("layers", "1"),
    ("hidden", "128"),
    ("word_dim", "64"),
    ("edit_word_dim", "64"),
    ("max_len", "50"),
    ("kappa", "25"),
    ("epsilon", "1"),
    // optimization
    ("optimizer", "adam"),
    ("lr", "0.001"),
    ("batch_size", "32"),
    ("epochs", "10"),
    ("clip", "5"),
    ("record_timing", "false"),
    // evaluation and generation
    ("samples", "1"),
    ("lambda_grid", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"),
    ("temperature", "1"),
    ("beam", "20"),
    ("steps", "10"),
    ("n_seq", "1000"),
    ("top_k", "1,10"),
];

/// Resolved configuration: schema defaults, then file, then flag overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }
}

fn schema_key(key: &str) -> Result<&'static str> {
    SCHEMA
        .iter()
        .map(|&(k, _)| k)
        .find(|&k| k == key)
        .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))
}

impl RunConfig {
    /// Applies every entry of a config file; unknown keys are errors.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = schema_key(key)?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        let k = schema_key(key)?;
        Ok(&self.values[k])
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        parse_value(key, self.raw(key)?)
    }

    /// Comma-separated list value.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_value(key, s))
            .collect()
    }

    /// Sorted `key=value` lines; feeding this back reproduces the config.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
