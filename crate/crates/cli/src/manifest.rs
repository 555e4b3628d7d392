//! Run manifests written next to every output artifact.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of_bytes(path: &Path, bytes: &[u8]) -> Self {
        Self {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

/// Everything needed to rerun a command: no timestamps or host details, so
/// reruns produce byte-identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub config: serde_json::Value,
}

/// Input files read by a command, digested as they are loaded.
#[derive(Debug, Default)]
pub struct Inputs {
    digests: Vec<FileDigest>,
}

impl Inputs {
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.digests.push(FileDigest::of_bytes(path, &bytes));
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> Result<String> {
        let bytes = self.read(path)?;
        String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))
    }
}

/// Collects written artifacts and emits the manifest beside the primary one.
pub struct Outputs {
    primary: PathBuf,
    digests: Vec<FileDigest>,
}

impl Outputs {
    pub fn new(primary: &Path) -> Self {
        Self {
            primary: primary.to_path_buf(),
            digests: Vec::new(),
        }
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.digests.push(FileDigest::of_bytes(path, bytes));
        Ok(())
    }

    pub fn finish(self, command: &'static str, seed: u64, inputs: Inputs, config: serde_json::Value) -> Result<()> {
        let manifest = RunManifest {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed,
            inputs: inputs.digests,
            outputs: self.digests,
            config,
        };
        let path = manifest_path(&self.primary);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
