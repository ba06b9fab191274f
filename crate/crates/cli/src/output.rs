//! Atomic output files; every CSV gets a config-hash comment plus header.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub struct OutputDir {
    dir: PathBuf,
    config_hash: String,
}

impl OutputDir {
    pub fn new(dir: &Path, config_hash: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes a CSV with the config-hash comment line, a header row, and
    /// pre-rendered data rows, atomically (write to a temp file, then rename).
    pub fn write_csv(&self, name: &str, header: &str, rows: &[String]) -> Result<()> {
        let mut text = format!("# config={}\n{header}\n", self.config_hash);
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        self.write_atomic(name, &text)
    }

    pub fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).context("serializing output")?;
        text.push('\n');
        self.write_atomic(name, &text)
    }

    pub fn write_atomic(&self, name: &str, contents: &str) -> Result<()> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &target)
            .with_context(|| format!("renaming into {}", target.display()))?;
        Ok(())
    }
}

/// Formats an optional float, leaving the field empty when absent.
pub fn opt_field<T: std::fmt::Display>(value: Option<T>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}
