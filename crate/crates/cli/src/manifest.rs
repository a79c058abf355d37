use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";
const LOCK_NAME: &str = ".protocomp.lock";

/// Build version in `git describe` style, falling back to the crate version.
pub fn version() -> &'static str {
    option_env!("PROTOCOMP_GIT_DESCRIBE").unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full command line that produced this directory.
    pub args: Vec<String>,
    pub config: Config,
    pub seed: u64,
    /// Every seed used, for commands that train several runs.
    pub seeds: Vec<u64>,
    pub version: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| protocomp::Error::io(&path, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| protocomp::Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| protocomp::Error::io(dir, e))?;
        let path = dir.join(LOCK_NAME);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => {
                CliError::Busy(format!("{} is in use by another command (lock file {})", dir.display(), path.display()))
            }
            _ => protocomp::Error::io(&path, e).into(),
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
