//! Flat `section.key=value` configuration.
//!
//! Every section has a default for every key. Parsing starts from the
//! defaults, rejects unknown or repeated keys, and the canonical text lists
//! all keys sorted, so the digest does not depend on the input's ordering.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::util::sha256;

/// A value that round-trips through its config text.
pub trait Value: Sized {
    fn to_text(&self) -> String;
    fn from_text(s: &str) -> Result<Self>;
}

macro_rules! via_fromstr {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn to_text(&self) -> String {
                self.to_string()
            }
            fn from_text(s: &str) -> Result<Self> {
                s.trim().parse().map_err(|_| Error::Config(format!("cannot parse {s:?} as {}", stringify!($t))))
            }
        }
    )*};
}

via_fromstr!(usize, u32, u64, f32, bool);

impl Value for String {
    fn to_text(&self) -> String {
        self.clone()
    }
    fn from_text(s: &str) -> Result<Self> {
        Ok(s.trim().to_string())
    }
}

impl Value for Vec<usize> {
    fn to_text(&self) -> String {
        self.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
    fn from_text(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(usize::from_text)
            .collect()
    }
}

/// A named group of config keys.
pub trait Section: Default {
    const NAME: &'static str;
    fn entries(&self) -> Vec<(&'static str, String)>;
    /// Sets one key; unknown keys are an error.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Sorted `NAME.key=value` lines.
    fn canonical(&self) -> String {
        let mut lines: Vec<String> = self
            .entries()
            .into_iter()
            .map(|(k, v)| format!("{}.{k}={v}\n", Self::NAME))
            .collect();
        lines.sort();
        lines.concat()
    }

    fn digest(&self) -> [u8; 32] {
        sha256(self.canonical().as_bytes())
    }

    /// Parses text containing only this section's keys.
    fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (key, value) in parse_lines(text)? {
            let field = key
                .strip_prefix(Self::NAME)
                .and_then(|k| k.strip_prefix('.'))
                .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
            s.set(field, &value)?;
        }
        Ok(s)
    }
}

/// Implements [`Section`] for a struct from a list of its fields.
macro_rules! config_section {
    ($ty:ty, $name:literal, [$($field:ident),* $(,)?]) => {
        impl $crate::config::Section for $ty {
            const NAME: &'static str = $name;
            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), $crate::config::Value::to_text(&self.$field))),*]
            }
            fn set(&mut self, key: &str, value: &str) -> $crate::error::Result<()> {
                match key {
                    $(stringify!($field) => self.$field = $crate::config::Value::from_text(value)?,)*
                    _ => return Err($crate::error::Error::Config(format!("unknown key {}.{key}", $name))),
                }
                Ok(())
            }
        }
    };
}
pub(crate) use config_section;

/// `key=value` pairs of a config text. Blank lines and `#` comments are
/// skipped; repeated keys are an error.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {line:?}", no + 1))
        })?;
        let k = k.trim().to_string();
        if seen.insert(k.clone(), ()).is_some() {
            return Err(Error::Config(format!(
                "line {}: repeated key {k:?}",
                no + 1
            )));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Groups the lines of `text` by their `section.` prefix, keeping each
/// group as config text for [`Section::from_text`].
pub fn split_sections(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out: BTreeMap<String, String> = BTreeMap::new();
    for (key, value) in parse_lines(text)? {
        let (section, _) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key {key:?} has no section prefix")))?;
        let group = out.entry(section.to_string()).or_default();
        group.push_str(&format!("{key}={value}\n"));
    }
    Ok(out)
}
