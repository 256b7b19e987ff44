//! Output directories that appear all at once, and provenance records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const CONFIG_FILE: &str = "config.toml";

/// A directory built under a hidden sibling name and renamed into place on
/// [`OutputDir::commit`]. Dropping it uncommitted removes the partial tree.
#[derive(Debug)]
pub struct OutputDir {
    target: PathBuf,
    staging: PathBuf,
    force: bool,
    committed: bool,
}

impl OutputDir {
    pub fn create(target: &Path, force: bool) -> CliResult<Self> {
        if target.exists() && !force {
            return Err(CliError::OutputExists(target.to_path_buf()));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("bad output path {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent)?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            std::fs::remove_dir_all(&staging)?;
        }
        std::fs::create_dir(&staging)?;
        Ok(Self {
            target: target.to_path_buf(),
            staging,
            force,
            committed: false,
        })
    }

    /// Where files go until commit.
    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn commit(mut self) -> CliResult<PathBuf> {
        if self.target.exists() {
            if !self.force {
                return Err(CliError::OutputExists(self.target.clone()));
            }
            if self.target.is_dir() {
                std::fs::remove_dir_all(&self.target)?;
            } else {
                std::fs::remove_file(&self.target)?;
            }
        }
        std::fs::rename(&self.staging, &self.target)?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.staging);
        }
    }
}

/// Write a single file next to its final name, then rename over it.
pub fn write_file_atomic(target: &Path, bytes: &[u8], force: bool) -> CliResult<()> {
    if target.exists() && !force {
        return Err(CliError::OutputExists(target.to_path_buf()));
    }
    let name = target
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("bad output path {}", target.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = target.with_file_name(format!(".{name}.partial-{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, target).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub stablerep: &'static str,
    pub stablerep_cli: &'static str,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            stablerep: stablerep::VERSION,
            stablerep_cli: env!("CARGO_PKG_VERSION"),
        }
    }
}

/// What produced an output directory. Holds no paths or clocks so that
/// repeated runs write the same bytes.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    /// Content identifiers of inputs read from disk, by role.
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: &str, cfg: &RunConfig) -> CliResult<Self> {
        Ok(Self {
            command: command.to_string(),
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            versions: Versions::default(),
            inputs: BTreeMap::new(),
        })
    }

    pub fn input(mut self, role: &str, id: &str) -> Self {
        self.inputs.insert(role.to_string(), id.to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(dir.join(PROVENANCE_FILE), bytes)?;
        Ok(())
    }
}

/// Resolved config plus provenance; every command directory gets both.
pub fn write_run_files(dir: &Path, cfg: &RunConfig, prov: &Provenance) -> CliResult<()> {
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    prov.write(dir)
}
