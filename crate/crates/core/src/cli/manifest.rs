use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DATA_DIR_VAR: &str = "RFM_LAB_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Artifact {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        })
    }
}

/// Record of one command invocation, enough to run it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Effective arguments after merging flags, config file and defaults.
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_text(path, &(text + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_VAR).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Relative output paths land under `RFM_LAB_DATA_DIR` when it is set.
pub fn output_path(p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    match data_dir() {
        Some(root) if path.is_relative() => root.join(path),
        _ => path,
    }
}

/// Relative inputs are looked up in the working directory first, then
/// under `RFM_LAB_DATA_DIR`. A missing input is an I/O error naming it.
pub fn input_path(p: &str) -> Result<PathBuf> {
    let path = PathBuf::from(p);
    if path.exists() {
        return Ok(path);
    }
    if let Some(root) = data_dir().filter(|_| path.is_relative()) {
        let alt = root.join(&path);
        if alt.exists() {
            return Ok(alt);
        }
    }
    Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "missing input artifact")))
}

/// `<path>.manifest.json`
pub fn manifest_for(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
