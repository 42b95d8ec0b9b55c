//! `key = value` configuration files.
//!
//! One setting per line; blank lines and lines starting with `#` are
//! ignored. Keys are long flag names without the leading dashes. A key may be
//! scoped to one command with a `command.` prefix (`train.lr = 1e-3`); a
//! scoped key wins over the bare one. Values given on the command line win
//! over both.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    path: Option<PathBuf>,
    values: HashMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn load(path: &Path, known_keys: &HashSet<String>) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, Some(path), known_keys)
    }

    pub fn parse(text: &str, path: Option<&Path>, known_keys: &HashSet<String>) -> Result<Self> {
        let where_ = |line: usize| location(path, line);
        let mut values = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}: expected key = value", where_(line))))?;
            let key = key.trim().trim_start_matches("--").to_string();
            if !known_keys.contains(&key) {
                return Err(Error::Config(format!(
                    "{}: unknown key {key:?}",
                    where_(line)
                )));
            }
            if values
                .insert(key.clone(), (value.trim().to_string(), line))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "{}: key {key:?} set twice",
                    where_(line)
                )));
            }
        }
        Ok(Self {
            path: path.map(Path::to_path_buf),
            values,
        })
    }

    pub fn scope<'a>(&'a self, command: &'a str) -> Resolver<'a> {
        Resolver {
            file: self,
            command,
        }
    }
}

fn location(path: Option<&Path>, line: usize) -> String {
    match path {
        Some(p) => format!("{}:{line}", p.display()),
        None => format!("line {line}"),
    }
}

/// Lookups for one command: flag, then scoped key, then bare key, then default.
pub struct Resolver<'a> {
    file: &'a ConfigFile,
    command: &'a str,
}

impl Resolver<'_> {
    fn raw(&self, key: &str) -> Option<&(String, usize)> {
        self.file
            .values
            .get(&format!("{}.{key}", self.command))
            .or_else(|| self.file.values.get(key))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((value, line)) = self.raw(key) else {
            return Ok(None);
        };
        value.parse().map(Some).map_err(|e| {
            let at = location(self.file.path.as_deref(), *line);
            Error::Config(format!("{at}: bad value {value:?} for {key}: {e}"))
        })
    }

    pub fn optional<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.parse(key),
        }
    }

    pub fn value<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.optional(flag, key)?.unwrap_or(default))
    }

    pub fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.optional(flag, key)?
            .ok_or_else(|| Error::Argument(format!("missing required --{key}")))
    }

    /// A boolean switch is on if the flag is present or the file sets it true.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.parse::<bool>(key)?.unwrap_or(false))
    }
}
