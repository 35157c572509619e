use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::rng::sha256_hex;

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    dim: usize,
    vector: Vec<f64>,
}

/// Memoizes mean embeddings of a provider, optionally persisting them to an
/// append-only JSON-lines file of `{key, dim, vector}` records.
pub struct EmbeddingCache<P> {
    inner: P,
    entries: RwLock<HashMap<String, Arc<Vec<f64>>>>,
    file: Option<(PathBuf, Mutex<File>)>,
}

impl<P: EmbeddingProvider> EmbeddingCache<P> {
    pub fn in_memory(inner: P) -> Self {
        EmbeddingCache {
            inner,
            entries: RwLock::new(HashMap::new()),
            file: None,
        }
    }

    /// Loads existing records from `path` (if present) and appends new ones.
    pub fn with_file(inner: P, path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
                if rec.dim != rec.vector.len() || rec.dim != inner.dim() {
                    return Err(Error::Format(format!(
                        "{}:{}: record dimension {} does not match provider dimension {}",
                        path.display(),
                        i + 1,
                        rec.vector.len(),
                        inner.dim()
                    )));
                }
                entries.insert(rec.key, Arc::new(rec.vector));
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(EmbeddingCache {
            inner,
            entries: RwLock::new(entries),
            file: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    pub fn key(&self, text: &str) -> String {
        cache_key(self.inner.provider_id(), text)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for EmbeddingCache<P> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_tokens(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        self.inner.embed_tokens(text)
    }

    fn embed_mean(&self, text: &str) -> Result<Vec<f64>> {
        let key = self.key(text);
        if let Some(v) = self.entries.read().expect("cache lock").get(&key) {
            return Ok(v.as_ref().clone());
        }
        let vector = self.inner.embed_mean(text)?;
        let mut entries = self.entries.write().expect("cache lock");
        if let Some(v) = entries.get(&key) {
            return Ok(v.as_ref().clone());
        }
        if let Some((path, file)) = &self.file {
            let rec = CacheRecord {
                key: key.clone(),
                dim: vector.len(),
                vector: vector.clone(),
            };
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            file.lock()
                .expect("cache file lock")
                .write_all(line.as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        entries.insert(key, Arc::new(vector.clone()));
        Ok(vector)
    }
}

/// Read-only provider over a file of `{key, dim, vector}` records produced by
/// an out-of-process text encoder. Keys follow [`EmbeddingCache::key`];
/// `embed_tokens` yields the stored mean as a single token.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbeddings {
    provider_id: String,
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn read(path: &Path, provider_id: &str, dim: usize) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if rec.dim != dim || rec.vector.len() != dim {
                return Err(Error::Format(format!(
                    "{}:{}: record dimension {} where {dim} was declared",
                    path.display(),
                    i + 1,
                    rec.vector.len()
                )));
            }
            entries.insert(rec.key, rec.vector);
        }
        Ok(PrecomputedEmbeddings {
            provider_id: provider_id.to_string(),
            dim,
            entries,
        })
    }

    pub fn key(&self, text: &str) -> String {
        cache_key(&self.provider_id, text)
    }
}

fn cache_key(provider_id: &str, text: &str) -> String {
    let mut bytes = provider_id.as_bytes().to_vec();
    bytes.push(0);
    bytes.extend_from_slice(text.as_bytes());
    sha256_hex(&bytes)
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_tokens(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        self.entries
            .get(&self.key(text))
            .map(|v| vec![v.clone()])
            .ok_or_else(|| Error::Data(format!("no precomputed embedding for `{text}`")))
    }
}
