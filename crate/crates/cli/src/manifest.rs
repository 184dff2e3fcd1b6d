//! Per-stage manifests: resolved config plus content hashes of every input
//! and output artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// SHA-256 of a file, or of the sorted `name hash` lines of a directory's
/// files.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.file_name());
        let mut h = Sha256::new();
        for e in entries {
            let sub = hash_path(&e.path())?;
            h.update(format!("{} {sub}\n", e.file_name().to_string_lossy()));
        }
        Ok(format!("{:x}", h.finalize()))
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(format!("{:x}", Sha256::digest(&bytes)))
    }
}

impl Manifest {
    pub fn new(stage: &str, config: String) -> Self {
        Self {
            stage: stage.into(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    /// Writes `<dir>/manifest-<stage>.json` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("manifest-{}.json", self.stage));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
