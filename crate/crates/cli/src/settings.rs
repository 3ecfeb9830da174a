//! Layered configuration: command-line flag, then config file, then default.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vaex_core::checkpoint::sha256_hex;
use vaex_core::kv::KvMap;

use crate::error::CliError;

#[derive(Clone, Debug, Default)]
pub struct Settings {
    /// The config file exactly as read, echoed into every run directory.
    pub file_text: Option<String>,
    values: KvMap,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|_| CliError::missing("config file", path))?;
        let values = KvMap::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok(Self { file_text: Some(text), values })
    }

    /// A flag value, when given, beats whatever the file says.
    pub fn flag<T: Display>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.values.set(key, v);
        }
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        self.values.parse_or(key, default).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.values.parse_opt(key).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        self.values.parse_list(key).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn path(&self, key: &str, default: PathBuf) -> PathBuf {
        self.values.get(key).map(PathBuf::from).unwrap_or(default)
    }

    /// Keys under `prefix.` with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvMap {
        let mut out = KvMap::new();
        let p = format!("{prefix}.");
        for (k, v) in self.values.iter() {
            if let Some(rest) = k.strip_prefix(&p) {
                out.set(rest, v);
            }
        }
        out
    }

    pub fn effective(&self) -> &KvMap {
        &self.values
    }

    /// First 12 hex digits of the SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        sha256_hex(self.values.to_text().as_bytes())[..12].to_string()
    }
}
