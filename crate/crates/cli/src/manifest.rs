//! Run manifests: what was run, on which inputs, and digests of what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub checkpoint_format: u32,
    pub command: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub seed: Option<u64>,
    pub threads: usize,
    pub config_hash: Option<String>,
    /// Input path (as given) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name, relative to the output directory, to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn file_name(command: &str) -> String {
    format!("{command}.manifest.json")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digests(root: &Path, names: &[String]) -> Result<BTreeMap<String, String>> {
    names.iter().map(|n| Ok((n.clone(), sha256_file(&root.join(n))?))).collect()
}

impl Manifest {
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(file_name(&self.command));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> robflat::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| robflat::Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| robflat::Error::Config(format!("malformed manifest {}: {e}", path.display())))
    }
}
