//! Option resolution: command-line flag, then config file, then default.
//!
//! Config files hold `key = value` lines whose keys are the long flag names
//! without dashes (`batch-size = 16`). `#` starts a comment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", n + 1))?;
        let key = k.trim().trim_start_matches("--").to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            bail!("config line {}: `{key}` set twice", n + 1);
        }
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            ..Self::default()
        })
    }

    fn file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let Some(raw) = self.file.get(key) else {
            return Ok(None);
        };
        self.used.insert(key.to_string());
        raw.parse::<T>()
            .map(Some)
            .map_err(|e| anyhow!("config key `{key}` = `{raw}`: {e}"))
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        let value = match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        let value = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    /// Boolean switch: present on the command line wins, else the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        self.used.insert(key.to_string());
        let value = flag || self.file_value::<bool>(key)?.unwrap_or(false);
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Fails on config keys nothing asked for (usually typos).
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.used.contains(*k)).collect();
        if !unknown.is_empty() {
            bail!("unknown config keys: {unknown:?}");
        }
        Ok(())
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}
