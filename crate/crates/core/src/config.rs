//! UTF-8 `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! reported by name so the CLI can surface them as usage errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A configuration type that can be read from and written to `key=value` text.
pub trait KeyValue: Sized {
    /// Applies one entry. Unknown keys must return [`Error::UnknownKey`].
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// All fields in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn validate(&self) -> Result<()> {
        Ok(())
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

pub fn load<T: KeyValue + Default>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = T::default();
    cfg.apply_text(&text)?;
    Ok(cfg)
}

pub fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

/// Parses `a,b` pairs.
pub fn parse_pair<T: FromStr>(key: &str, value: &str) -> Result<(T, T)>
where
    T::Err: Display,
{
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected two comma-separated values")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}
