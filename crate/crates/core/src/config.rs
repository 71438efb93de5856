//! Flat `dotted.key = value` configuration text.
//!
//! Grammar, line by line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := ws* "#" any*
//! entry   := ws* key ws* "=" ws* value ws*
//! key     := [A-Za-z0-9_.-]+
//! value   := any* (up to an unquoted "#", trimmed)
//! ```
//!
//! A later entry for the same key replaces the earlier one. Values are
//! parsed by the typed getters; every key must be consumed, otherwise the
//! first leftover key is reported as unknown.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
    // dotted path of this section inside the original config, for messages
    prefix: String,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    fn full_key(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.prefix)
        }
    }

    fn child_prefix(&self, prefix: &str) -> String {
        self.full_key(prefix)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FlatConfig::new();
        for (n, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(Error::Config(format!("line {}: malformed key {key:?}", n + 1)));
            }
            cfg.entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FlatConfig::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not `key=value`")))?;
        let k = k.trim();
        if !valid_key(k) {
            return Err(Error::Config(format!("malformed key {k:?}")));
        }
        self.entries.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn peek(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("key `{}`: cannot parse {v:?}: {e}", self.full_key(key)))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_required<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.take(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{}`", self.full_key(key))))
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.entries.remove(key).as_deref() {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(Error::Config(format!("key `{}`: expected a boolean, got {v:?}", self.full_key(key)))),
        }
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(v) = self.entries.remove(key) else { return Ok(None) };
        v.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| Error::Config(format!("key `{}`: cannot parse {s:?}: {e}", self.full_key(key))))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Splits off every key under `prefix.` into its own config, with the
    /// prefix stripped.
    pub fn take_section(&mut self, prefix: &str) -> FlatConfig {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(&dotted)).cloned().collect();
        let mut out = FlatConfig { entries: BTreeMap::new(), prefix: self.child_prefix(prefix) };
        for k in keys {
            let v = self.entries.remove(&k).expect("key listed above");
            out.entries.insert(k[dotted.len()..].to_string(), v);
        }
        out
    }

    /// Copy of the keys under `prefix.` without removing them.
    pub fn section(&self, prefix: &str) -> FlatConfig {
        let dotted = format!("{prefix}.");
        FlatConfig {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|s| (s.to_string(), v.clone())))
                .collect(),
            prefix: self.child_prefix(prefix),
        }
    }

    /// Layers `other` on top of `self`.
    pub fn merged(mut self, other: &FlatConfig) -> FlatConfig {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self, context: &str) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => {
                let full = if context.is_empty() { self.full_key(k) } else { format!("{context}.{k}") };
                Err(Error::Config(format!("unknown key `{full}`")))
            }
        }
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = FlatConfig::parse(
            "# header\n a.b = 3 # trailing\n\nname=  x y \na.b = 4\nlist = 1, 2,3\n",
        )
        .unwrap();
        assert_eq!(c.take::<u32>("a.b").unwrap(), Some(4));
        assert_eq!(c.take::<String>("name").unwrap().as_deref(), Some("x y"));
        assert_eq!(c.take_list::<u64>("list").unwrap(), Some(vec![1, 2, 3]));
        c.finish("").unwrap();
    }

    #[test]
    fn reports_unknown_key() {
        let mut c = FlatConfig::parse("known = 1\nmystery.key = 2\n").unwrap();
        let _: Option<u8> = c.take("known").unwrap();
        let err = c.finish("").unwrap_err().to_string();
        assert!(err.contains("mystery.key"), "{err}");
    }

    #[test]
    fn malformed_lines() {
        assert!(FlatConfig::parse("just words\n").is_err());
        assert!(FlatConfig::parse("bad key = 1\n").is_err());
        let mut c = FlatConfig::parse("n = abc\n").unwrap();
        let err = c.take::<usize>("n").unwrap_err().to_string();
        assert!(err.contains("`n`"));
    }

    #[test]
    fn sections() {
        let mut c = FlatConfig::parse("s.a = 1\ns.b.c = 2\nt = 3\n").unwrap();
        let mut s = c.take_section("s");
        assert_eq!(s.take::<u8>("b.c").unwrap(), Some(2));
        assert_eq!(s.take::<u8>("a").unwrap(), Some(1));
        assert!(s.is_empty());
        assert_eq!(c.keys().collect::<Vec<_>>(), vec!["t"]);
    }

    #[test]
    fn override_syntax() {
        let mut c = FlatConfig::new();
        c.set_override("seeds=1,2,3").unwrap();
        assert_eq!(c.peek("seeds"), Some("1,2,3"));
        assert!(c.set_override("noequals").is_err());
    }
}
