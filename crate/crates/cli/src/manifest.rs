//! Run manifests: the resolved command, its seed and SHA-256 hashes of
//! every file read or written.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::{Command, INTERFACE_VERSION};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of_bytes(path: &Path, bytes: &[u8]) -> Self {
        Self {
            path: path.to_path_buf(),
            sha256: hex(&Sha256::digest(bytes)),
        }
    }

    pub fn of_file(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self::of_bytes(path, &bytes))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub interface: u32,
    pub seed: u64,
    pub command: Command,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl Manifest {
    pub fn new(command: Command, inputs: Vec<Artifact>, outputs: Vec<Artifact>) -> Self {
        Self {
            tool: "ppfm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            interface: INTERFACE_VERSION,
            seed: command.seed(),
            command,
            inputs,
            outputs,
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|source| CliError::Manifest {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("manifest serializes");
        v.push(b'\n');
        v
    }
}

/// Collects the files a workflow writes, hashing each one.
#[derive(Debug, Default)]
pub struct Outputs {
    pub written: Vec<Artifact>,
}

impl Outputs {
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
        self.written.push(Artifact::of_bytes(path, bytes));
        log::info!("wrote {}", path.display());
        Ok(())
    }
}
