//! Flat `key = value` text, one assignment per line, `#` starts a comment.
//!
//! Used for config files, recipe/spec summaries and run manifests.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    entries: Vec<(String, String)>,
}

impl Summary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::Config(format!("invalid value for {key}: {raw:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut s = Summary::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if s.get(k).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", lineno + 1)));
            }
            s.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(s)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_text(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let s = Summary::parse_text("# header\nseed = 42\n\n  lr=0.001  # inline\n").unwrap();
        assert_eq!(s.get("seed"), Some("42"));
        assert_eq!(s.parse::<f64>("lr").unwrap(), 0.001);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn rejects_garbage_and_duplicates() {
        assert!(Summary::parse_text("novalue\n").is_err());
        assert!(Summary::parse_text("a = 1\na = 2\n").is_err());
        assert!(Summary::parse_text(" = 2\n").is_err());
    }

    #[test]
    fn render_roundtrip() {
        let mut s = Summary::new();
        s.push("algo", "ties");
        s.push("lambda", 0.3);
        assert_eq!(s.render(), "algo = ties\nlambda = 0.3\n");
        assert_eq!(Summary::parse_text(&s.render()).unwrap(), s);
    }
}
