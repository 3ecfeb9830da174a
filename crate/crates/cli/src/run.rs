//! Run directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use vaex_core::checkpoint::file_sha256;
use vaex_core::kv::KvMap;

use crate::error::CliError;
use crate::settings::Settings;

pub const MANIFEST: &str = "manifest.txt";

/// `<root>/runs/<timestamp>-<command>-<config hash>/`, holding the echoed
/// configuration, the run's outputs and a manifest of hashes and seeds.
pub struct RunDir {
    pub path: PathBuf,
    manifest: KvMap,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, settings: &Settings) -> Result<Self, CliError> {
        let stamp = Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
        let hash = settings.hash();
        let base = root.join("runs");
        let mut path = base.join(format!("{stamp}-{command}-{hash}"));
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = base.join(format!("{stamp}-{command}-{hash}-{n}"));
        }
        fs::create_dir_all(&path)?;
        if let Some(text) = &settings.file_text {
            fs::write(path.join("config.txt"), text)?;
        }
        fs::write(path.join("effective_config.txt"), settings.effective().to_text())?;
        let mut manifest = KvMap::new();
        manifest.set("command", command);
        manifest.set("version", env!("CARGO_PKG_VERSION"));
        manifest.set("started", &stamp);
        manifest.set("config_hash", &hash);
        for (k, v) in settings.effective().iter() {
            if k == "seed" || k.ends_with(".seed") || k.ends_with("_seed") {
                manifest.set(&format!("seed.{k}"), v);
            }
        }
        Ok(Self { path, manifest })
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.set(&format!("seed.{name}"), value);
    }

    pub fn note(&mut self, key: &str, value: impl std::fmt::Display) {
        self.manifest.set(key, value);
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        self.hash_entry("input", name, path)
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        self.hash_entry("output", name, path)
    }

    fn hash_entry(&mut self, kind: &str, name: &str, path: &Path) -> Result<(), CliError> {
        self.manifest.set(&format!("{kind}.{name}.path"), path.display());
        if path.is_file() {
            self.manifest.set(&format!("{kind}.{name}.sha256"), file_sha256(path)?);
        }
        Ok(())
    }

    /// Copies a run output to its well-known location for later commands.
    pub fn publish(&mut self, name: &str, from: &Path, to: &Path) -> Result<(), CliError> {
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = to.with_extension("partial");
        fs::copy(from, &tmp)?;
        fs::rename(&tmp, to)?;
        self.manifest.set(&format!("published.{name}"), to.display());
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.manifest.set("finished", Utc::now().format("%Y%m%dT%H%M%SZ"));
        fs::write(self.path.join(MANIFEST), self.manifest.to_text())?;
        Ok(self.path)
    }
}
