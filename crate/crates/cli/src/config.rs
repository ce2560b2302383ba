//! Layered run configuration: defaults < profile < config file < explicit
//! flags. Every resolved value is recorded so reports and logs can embed the
//! exact configuration that produced them.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use voxsynth::error::{Error, Result};
use voxsynth::unet::UNetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => {
                Err(Error::InvalidConfig(format!("profile must be 'desk' or 'paper', got {other:?}")))
            }
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        match self {
            Profile::Desk => UNetConfig::desk(),
            Profile::Paper => UNetConfig::default(),
        }
    }

    pub fn phantom_size(&self) -> usize {
        match self {
            Profile::Desk => 32,
            Profile::Paper => 64,
        }
    }
}

/// Merges an optional `key=value` config file with command-line flags and
/// remembers everything it hands out.
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Resolver {
    pub fn new(config_path: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = config_path {
            let text = fs::read_to_string(path)?;
            for raw in text.lines() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::InvalidConfig(format!("config line {line:?} is not key=value"))
                })?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Resolver { file, resolved: RefCell::new(BTreeMap::new()) })
    }

    fn record(&self, key: &str, value: impl Display) {
        self.resolved.borrow_mut().insert(key.to_string(), value.to_string());
    }

    fn parse_file_value<T: FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| {
            Error::InvalidConfig(format!("config key {key}={raw:?} does not parse"))
        })
    }

    /// Flag wins, then the config file, then the default.
    pub fn get<T: FromStr + Display>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => self.parse_file_value(key, raw)?,
                None => default,
            },
        };
        self.record(key, &value);
        Ok(value)
    }

    /// Like [`Resolver::get`] but with no default: absence is a config error.
    pub fn get_required<T: FromStr + Display>(&self, key: &str, flag: Option<T>) -> Result<T> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => self.parse_file_value(key, raw)?,
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "missing required option --{key} (or config key {key})"
                    )))
                }
            },
        };
        self.record(key, &value);
        Ok(value)
    }

    /// Optional value: flag, else config file, else `None`.
    pub fn get_optional<T: FromStr + Display>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(self.parse_file_value(key, raw)?),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.record(key, v);
        }
        Ok(value)
    }

    /// A true flag wins; otherwise the config file decides; default false.
    pub fn get_bool(&self, key: &str, flag: bool) -> Result<bool> {
        let value = if flag {
            true
        } else {
            match self.file.get(key) {
                Some(raw) => match raw.as_str() {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "config key {key}={other:?} is not a boolean"
                        )))
                    }
                },
                None => false,
            }
        };
        self.record(key, value);
        Ok(value)
    }

    /// Paths resolve like [`Resolver::get_required`] but without Display.
    pub fn get_path(&self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => PathBuf::from(raw),
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "missing required option --{key} (or config key {key})"
                    )))
                }
            },
        };
        self.record(key, value.display());
        Ok(value)
    }

    pub fn get_path_optional(&self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let value = match flag {
            Some(v) => Some(v),
            None => self.file.get(key).map(PathBuf::from),
        };
        if let Some(v) = &value {
            self.record(key, v.display());
        }
        Ok(value)
    }

    /// Sorted `key=value` lines covering everything this run resolved.
    pub fn provenance_lines(&self) -> Vec<String> {
        self.resolved.borrow().iter().map(|(k, v)| format!("{k}={v}")).collect()
    }
}

/// Settings shared by every subcommand. Strict mode is enforced during
/// resolution (it rejects multi-threaded configurations), so only the values
/// commands act on are carried.
pub struct CommonSettings {
    pub seed: u64,
    pub threads: usize,
    pub profile: Profile,
    pub out: PathBuf,
}

pub fn resolve_common(
    resolver: &Resolver,
    seed: Option<u64>,
    threads: Option<usize>,
    strict: bool,
    profile: Option<String>,
    out: Option<PathBuf>,
) -> Result<CommonSettings> {
    let profile = Profile::parse(&resolver.get("profile", profile, "desk".to_string())?)?;
    let seed = resolver.get("seed", seed, 0u64)?;
    let threads = resolver.get("threads", threads, 1usize)?;
    if threads == 0 {
        return Err(Error::InvalidConfig("threads must be at least 1".into()));
    }
    let strict = resolver.get_bool("strict", strict)?;
    if strict && threads != 1 {
        return Err(Error::InvalidConfig(
            "strict mode guarantees bit-exact determinism only with --threads 1".into(),
        ));
    }
    let out = resolver.get_path("out", out)?;
    Ok(CommonSettings { seed, threads, profile, out })
}
