//! Run manifests: what a command read, what it wrote, and the content hash
//! of each file, enough to re-run the command and compare outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::LlmCalls;
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;

/// Git object id of a blob in a SHA-256 repository:
/// `sha256("blob <len>\0" ++ bytes)`.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(git_blob_hash(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub shots: Vec<usize>,
    pub variants: Vec<String>,
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Artifact path, relative to the output directory, to content hash.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_calls: Option<LlmCalls>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str) -> Self {
        RunManifest {
            command: command.into(),
            config_hash: config_hash.into(),
            seeds: Vec::new(),
            shots: Vec::new(),
            variants: Vec::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            llm_calls: None,
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.into(), hash_file(path)?);
        Ok(())
    }

    /// Records `path` keyed relative to `root`, or by its full path when it
    /// lies elsewhere.
    pub fn add_artifact(&mut self, root: &Path, path: &Path) -> Result<()> {
        let key = match path.strip_prefix(root) {
            Ok(rel) => rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/"),
            Err(_) => path.display().to_string(),
        };
        self.artifacts.insert(key, hash_file(path)?);
        Ok(())
    }

    /// Records every file below `dir`.
    pub fn add_tree(&mut self, root: &Path, dir: &Path) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                self.add_tree(root, &path)?;
            } else {
                self.add_artifact(root, &path)?;
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
