//! `run.toml`: what was run, with which settings, and what it produced.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{io_err, Result};

pub const FILE: &str = "run.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Path relative to the run directory, or as given for inputs.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub status: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub config: Config,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path, label: String) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(FileDigest {
        path: label,
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

/// Every regular file under `dir` except the manifest, sorted by path.
pub fn digest_tree(dir: &Path) -> Result<Vec<FileDigest>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.strip_prefix(root).map(|p| p != Path::new(FILE)).unwrap_or(true) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    if dir.is_dir() {
        walk(dir, dir, &mut files)?;
    }
    files.sort();
    files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
            digest_file(p, rel)
        })
        .collect()
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(FILE);
        let text = toml::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        toml::from_str(&text).map_err(|e| crate::error::CliError::Run(format!("{}: {e}", path.display())))
    }

    pub fn artifact(&self, path: &str) -> Option<&FileDigest> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}
