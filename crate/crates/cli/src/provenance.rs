use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Input path (as given) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub struct RunDir {
    root: PathBuf,
    record: RunRecord,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            record: RunRecord {
                command: command.to_string(),
                seed: config.seed,
                config: config.clone(),
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
            },
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.record.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Records a file already written under the run directory.
    pub fn artifact(&mut self, rel: &str) -> Result<()> {
        let hash = sha256_file(&self.path(rel))?;
        self.record.artifacts.insert(rel.to_string(), hash);
        Ok(())
    }

    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.artifact(rel)
    }

    pub fn finish(self) -> Result<RunRecord> {
        let text = serde_json::to_string_pretty(&self.record)? + "\n";
        let path = self.root.join("run.json");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.record)
    }
}

pub fn load_record(dir: &Path) -> Result<RunRecord> {
    let path = dir.join("run.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Artifacts whose current hash differs from the recorded one.
pub fn verify(dir: &Path) -> Result<Vec<String>> {
    let record = load_record(dir)?;
    let mut stale = vec![];
    for (rel, hash) in &record.artifacts {
        if sha256_file(&dir.join(rel)).ok().as_ref() != Some(hash) {
            stale.push(rel.clone());
        }
    }
    Ok(stale)
}
