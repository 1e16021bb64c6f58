//! `key=value` settings with per-key provenance.
//!
//! Settings start from defaults, are overlaid by a config file, then by
//! command-line flags. The resolved set is written into every run directory
//! and can be read back to replay the run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const RESOLVED_CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Default => "default",
            Self::File => "file",
            Self::Flag => "flag",
        })
    }
}

/// Parse `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            what: "config",
            detail: format!("line {}: expected key=value, got {raw:?}", i + 1),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Format {
                what: "config",
                detail: format!("line {}: empty key", i + 1),
            });
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, (String, Provenance)>,
}

impl RunConfig {
    /// The keys named here are the only ones later layers may set.
    pub fn with_defaults<I, K, V>(defaults: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            entries: defaults
                .into_iter()
                .map(|(k, v)| (k.into(), (v.into(), Provenance::Default)))
                .collect(),
        }
    }

    fn set(&mut self, key: &str, value: &str, p: Provenance) -> Result<()> {
        match self.entries.get_mut(key) {
            Some(slot) => {
                *slot = (value.to_string(), p);
                Ok(())
            }
            None => Err(Error::Config(format!("unknown setting {key:?}"))),
        }
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        for (k, v) in read_kv_file(path)? {
            self.set(&k, &v, Provenance::File)?;
        }
        Ok(())
    }

    pub fn set_flag(&mut self, key: &str, value: impl ToString) -> Result<()> {
        self.set(key, &value.to_string(), Provenance::Flag)
    }

    /// Replace a placeholder such as `auto` with the value it resolved to,
    /// keeping the provenance of the setting.
    pub fn resolve(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let p = self
            .provenance(key)
            .ok_or_else(|| Error::Config(format!("unknown setting {key:?}")))?;
        self.set(key, &value.to_string(), p)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(|(v, _)| v.as_str())
            .ok_or_else(|| Error::Config(format!("unknown setting {key:?}")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("setting {key}={v:?} is not a valid value")))
    }

    pub fn provenance(&self, key: &str) -> Option<Provenance> {
        self.entries.get(key).map(|(_, p)| *p)
    }

    /// Resolved values only.
    pub fn values(&self) -> BTreeMap<String, String> {
        self.entries.iter().map(|(k, (v, _))| (k.clone(), v.clone())).collect()
    }

    /// One `key=value # provenance` line per setting, sorted by key.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, (v, p))| format!("{k}={v} # {p}\n"))
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&p, self.render()).map_err(|e| Error::io(&p, e))
    }
}
