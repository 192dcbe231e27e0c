//! Flat `key=value` configuration text.
//!
//! One pair per line, `#` starts a comment line, blank lines are ignored.
//! Keys are dotted (`train.lr0`). Every key must be consumed by some
//! section; leftovers are rejected so that typos never pass silently.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed pairs awaiting consumption.
#[derive(Debug, Default)]
pub struct Fields {
    pairs: BTreeMap<String, (usize, String)>,
}

impl Fields {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty key")));
            }
            if let Some((first, _)) = pairs.insert(k.to_owned(), (lineno, v.to_owned())) {
                return Err(Error::Config(format!("line {lineno}: duplicate key {k} (first on line {first})")));
            }
        }
        Ok(Fields { pairs })
    }

    /// Removes and parses `key`, leaving `dst` untouched when absent.
    pub fn take<T>(&mut self, key: &str, dst: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some((line, v)) = self.pairs.remove(key) {
            *dst = v
                .parse()
                .map_err(|e| Error::Config(format!("line {line}: {key}={v:?}: {e}")))?;
        }
        Ok(())
    }

    /// Like [`take`](Self::take) for values without a `FromStr` impl.
    pub fn take_with<T>(&mut self, key: &str, dst: &mut T, parse: impl FnOnce(&str) -> Result<T>) -> Result<()> {
        if let Some((line, v)) = self.pairs.remove(key) {
            *dst = parse(&v).map_err(|e| Error::Config(format!("line {line}: {key}: {e}")))?;
        }
        Ok(())
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.pairs.is_empty() {
            return Ok(());
        }
        let keys: Vec<String> =
            self.pairs.iter().map(|(k, (line, _))| format!("{k} (line {line})")).collect();
        Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
    }
}

/// Appends `key=value\n`.
pub fn emit(out: &mut String, key: &str, value: impl Display) {
    out.push_str(key);
    out.push('=');
    out.push_str(&value.to_string());
    out.push('\n');
}
