//! Layered option resolution: flag, then config-file key, then the
//! `CMDSR_SEED` environment variable (seed only), then defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const RESOLVED_NAME: &str = "resolved-config.json";
pub const SEED_ENV: &str = "CMDSR_SEED";

pub struct Layered {
    command: &'static str,
    map: Map<String, Value>,
}

impl Layered {
    /// Start from the config file, if any. A `command` key (as written into
    /// resolved configs) must name this subcommand.
    pub fn load(command: &'static str, path: Option<&Path>) -> Result<Self> {
        let mut map = match path {
            None => Map::new(),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                match serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))? {
                    Value::Object(m) => m,
                    _ => bail!("config {} must be a JSON object", p.display()),
                }
            }
        };
        if let Some(c) = map.remove("command") {
            if c.as_str() != Some(command) {
                bail!("config key `command`: file is for `{c}`, not `{command}`");
            }
        }
        Ok(Self { command, map })
    }

    /// Override `key` with a flag value when the flag was given.
    pub fn set<T: Serialize>(&mut self, key: &str, flag: Option<T>) {
        if let Some(v) = flag {
            self.map.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
        }
    }

    /// Fill `seed` from the environment when neither flag nor file set it.
    pub fn seed_fallback(&mut self) -> Result<()> {
        if self.map.contains_key("seed") {
            return Ok(());
        }
        if let Ok(text) = std::env::var(SEED_ENV) {
            let seed: u64 = text
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={text:?} is not an unsigned integer"))?;
            self.map.insert("seed".into(), seed.into());
        }
        Ok(())
    }

    /// Move the listed keys into their own object.
    pub fn split_off(&mut self, keys: &[&str]) -> Map<String, Value> {
        keys.iter()
            .filter_map(|k| self.map.remove(*k).map(|v| (k.to_string(), v)))
            .collect()
    }

    pub fn parse<T: DeserializeOwned>(self) -> Result<T> {
        parse_map(self.command, self.map)
    }
}

pub fn parse_map<T: DeserializeOwned>(command: &str, map: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(map)).map_err(|e| anyhow::anyhow!("{command} config: {e}"))
}

/// Write `options` plus the subcommand name as `dir/resolved-config.json`.
pub fn write_resolved(dir: &Path, command: &str, options: &impl Serialize) -> Result<PathBuf> {
    let mut map = match serde_json::to_value(options)? {
        Value::Object(m) => m,
        _ => unreachable!("options serialize as objects"),
    };
    map.insert("command".into(), command.into());
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RESOLVED_NAME);
    fs::write(&path, serde_json::to_string_pretty(&map)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Fetch a required option or explain how to provide it.
pub fn required<T: Clone>(value: &Option<T>, key: &str, flag: &str) -> Result<T> {
    value
        .clone()
        .with_context(|| format!("missing `{key}`: pass {flag} or set it in the config file"))
}
