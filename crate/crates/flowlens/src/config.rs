//! `key = value` configuration files and the resolved run configuration.
//!
//! Resolution order for every key: command-line flag, then config file, then
//! built-in default. Seeds additionally fall back to `FLOWLENS_SEED`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};
use crate::fsutil;

pub const SEED_ENV: &str = "FLOWLENS_SEED";
pub const RUN_CONFIG: &str = "run_config.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub path: PathBuf,
    pub entries: Vec<ConfigEntry>,
}

impl ConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line, reason: String| CliError::Config {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut entries: Vec<ConfigEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split_once('#').map_or(raw, |(b, _)| b).trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, found `{body}`")))?;
            let (key, value) = (k.trim(), v.trim());
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(err(line, format!("invalid key `{key}`")));
            }
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(err(
                    line,
                    format!("duplicate key `{key}` (first set on line {})", prev.line),
                ));
            }
            entries.push(ConfigEntry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(ConfigFile {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsutil::read_to_string(path)?, path)
    }

    pub fn get(&self, key: &str) -> Option<&ConfigEntry> {
        self.entries.iter().find(|e| e.key == key)
    }
}

/// A value type that can appear in a config file.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("`{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u32, u64, usize, f64, String);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(format!("`{s}` is not a boolean")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            Err("empty path".into())
        } else {
            Ok(PathBuf::from(s))
        }
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// Comma-separated list.
impl<V: ConfigValue> ConfigValue for Vec<V> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| V::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter()
            .map(ConfigValue::render)
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
    Env,
    Derived,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "config file",
            Source::Flag => "flag",
            Source::Env => SEED_ENV,
            Source::Derived => "derived",
        }
    }
}

/// Fully resolved settings of one command invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: String,
    file: Option<ConfigFile>,
    used: HashSet<String>,
    pub values: Vec<(String, String, Source)>,
}

impl RunConfig {
    pub fn new(command: &str, config: Option<&Path>) -> Result<Self> {
        let file = config.map(ConfigFile::load).transpose()?;
        if let Some(f) = &file {
            if let Some(e) = f.get("command") {
                if e.value != command {
                    return Err(CliError::Config {
                        path: f.path.clone(),
                        line: e.line,
                        reason: format!("file configures `{}`, not `{command}`", e.value),
                    });
                }
            }
        }
        let mut used = HashSet::new();
        used.insert("command".to_string());
        Ok(RunConfig {
            command: command.to_string(),
            file,
            used,
            values: Vec::new(),
        })
    }

    fn file_value<V: ConfigValue>(&mut self, key: &str) -> Result<Option<V>> {
        self.used.insert(key.to_string());
        let Some(f) = &self.file else { return Ok(None) };
        let Some(e) = f.get(key) else { return Ok(None) };
        V::parse_value(&e.value)
            .map(Some)
            .map_err(|reason| CliError::Config {
                path: f.path.clone(),
                line: e.line,
                reason: format!("{key}: {reason}"),
            })
    }

    pub fn record(&mut self, key: &str, value: &impl ConfigValue, source: Source) {
        self.values.retain(|(k, _, _)| k != key);
        self.values.push((key.to_string(), value.render(), source));
    }

    /// Flag, then file, then `default`.
    pub fn get<V: ConfigValue>(&mut self, key: &str, flag: Option<V>, default: V) -> Result<V> {
        match self.get_opt(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.record(key, &default, Source::Default);
                Ok(default)
            }
        }
    }

    /// Flag, then file; `None` when neither sets the key.
    pub fn get_opt<V: ConfigValue>(&mut self, key: &str, flag: Option<V>) -> Result<Option<V>> {
        let found = match flag {
            Some(v) => {
                // An overridden file key still counts as known.
                self.used.insert(key.to_string());
                Some((v, Source::Flag))
            }
            None => self.file_value(key)?.map(|v| (v, Source::File)),
        };
        Ok(found.map(|(v, src)| {
            self.record(key, &v, src);
            v
        }))
    }

    pub fn require<V: ConfigValue>(
        &mut self,
        key: &str,
        flag: Option<V>,
        flag_name: &str,
    ) -> Result<V> {
        self.get_opt(key, flag)?.ok_or_else(|| {
            CliError::Usage(format!(
                "missing required {flag_name} (or `{key}` in the config file)"
            ))
        })
    }

    /// A path made absolute against the working directory.
    pub fn path(&mut self, key: &str, flag: Option<PathBuf>, flag_name: &str) -> Result<PathBuf> {
        let p = self.require(key, flag, flag_name)?;
        let abs = std::path::absolute(&p).map_err(|e| CliError::io(&p, e))?;
        let src = self
            .values
            .iter()
            .find(|(k, _, _)| k == key)
            .map_or(Source::Flag, |v| v.2);
        self.record(key, &abs, src);
        Ok(abs)
    }

    /// Flag, file, then the environment; `None` if no seed is given anywhere.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<Option<u64>> {
        if let Some(s) = self.get_opt("seed", flag)? {
            return Ok(Some(s));
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let s = u64::parse_value(v.trim())
                    .map_err(|e| CliError::Usage(format!("{SEED_ENV} is not a valid seed: {e}")))?;
                self.record("seed", &s, Source::Env);
                Ok(Some(s))
            }
            Err(_) => Ok(None),
        }
    }

    /// Rejects config-file keys that no part of the command consumed.
    pub fn finish(&self) -> Result<()> {
        if let Some(f) = &self.file {
            if let Some(e) = f.entries.iter().find(|e| !self.used.contains(&e.key)) {
                return Err(CliError::Config {
                    path: f.path.clone(),
                    line: e.line,
                    reason: format!("unknown key `{}` for `{}`", e.key, self.command),
                });
            }
        }
        Ok(())
    }

    /// Text form, itself a valid config file for the same command.
    pub fn render(&self) -> String {
        let mut s = format!(
            "# flowlens {} run configuration\ncommand = {}\n",
            self.command, self.command
        );
        let width = self
            .values
            .iter()
            .map(|(k, _, _)| k.len())
            .max()
            .unwrap_or(0);
        for (k, v, src) in &self.values {
            let _ = writeln!(s, "{k:<width$} = {v}  # {}", src.name());
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_CONFIG);
        fsutil::write_atomic(&path, self.render().as_bytes())?;
        Ok(path)
    }
}
