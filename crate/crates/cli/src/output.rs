use std::fs;
use std::path::{Path, PathBuf};

use carbonpanel::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;

/// Collects output files in memory, then writes them and a manifest listing
/// their digests. Nothing time- or host-dependent is recorded.
pub struct OutputSet {
    files: Vec<(String, Vec<u8>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub toolkit: String,
    pub version: String,
    pub seed: Option<u64>,
    pub command: Command,
    /// Fully resolved configuration (defaults and presets applied).
    pub resolved: serde_json::Value,
    pub outputs: Vec<OutputDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

pub const MANIFEST: &str = "manifest.json";

impl OutputSet {
    pub fn new() -> Self {
        Self { files: Vec::new() }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.retain(|(n, _)| n != name);
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn add_with(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut bytes = Vec::new();
        write(&mut bytes)?;
        self.add(name, bytes);
        Ok(())
    }

    pub fn write(mut self, dir: &Path, command: &Command, seed: Option<u64>, resolved: serde_json::Value) -> Result<PathBuf> {
        if dir.as_os_str().is_empty() {
            return Err(Error::InvalidConfig("--out is required".into()));
        }
        fs::create_dir_all(dir)?;
        self.files.sort_by(|a, b| a.0.cmp(&b.0));
        let outputs = self
            .files
            .iter()
            .map(|(name, bytes)| OutputDigest { file: name.clone(), bytes: bytes.len(), sha256: hex(&Sha256::digest(bytes)) })
            .collect();
        let manifest = Manifest {
            toolkit: "carbonpanel".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            command: command.clone(),
            resolved,
            outputs,
        };
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
        }
        let path = dir.join(MANIFEST);
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes)?;
        Ok(path)
    }
}

impl Default for OutputSet {
    fn default() -> Self {
        Self::new()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
