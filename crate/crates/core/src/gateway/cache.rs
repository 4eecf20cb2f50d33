use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{CompletionRequest, TopK};

/// Every field that distinguishes one completion request from another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKeyFields {
    pub backend_id: String,
    pub model_id: String,
    pub prompt: String,
    pub temperature: f64,
    pub top_k: TopK,
    pub n_samples: u32,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl CacheKeyFields {
    pub fn new(backend_id: &str, model_id: &str, request: &CompletionRequest) -> Self {
        Self {
            backend_id: backend_id.to_string(),
            model_id: model_id.to_string(),
            prompt: request.prompt.clone(),
            temperature: request.temperature,
            top_k: request.top_k,
            n_samples: request.n_samples,
            max_tokens: request.max_tokens,
            seed: request.seed,
        }
    }

    /// Hex SHA-256 over the canonical JSON encoding of the fields.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("key fields serialize");
        hex::encode(Sha256::digest(&canonical))
    }

    /// First 16 hex characters of [`CacheKeyFields::digest`], used in errors and logs.
    pub fn short_digest(&self) -> String {
        self.digest()[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub key_fields: CacheKeyFields,
    pub texts: Vec<String>,
    /// Unix seconds.
    pub created_at: u64,
}

#[derive(Debug, Error)]
#[error("cache entry {key} is corrupt: {reason}")]
pub struct CacheCorruption {
    pub key: String,
    pub reason: String,
}

/// Content-addressed on-disk store: `{root}/{digest[0..2]}/{digest}.json`.
///
/// Entries are written to a temporary file and renamed into place, so
/// concurrent writers never expose a partial entry.
#[derive(Debug, Clone)]
pub struct CacheStore {
    root: PathBuf,
}

impl CacheStore {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, digest: &str) -> PathBuf {
        self.root.join(&digest[..2]).join(format!("{digest}.json"))
    }

    /// `Ok(None)` on a miss; `Err` when an entry exists but fails validation.
    pub fn get(&self, fields: &CacheKeyFields) -> Result<Option<Vec<String>>, CacheCorruption> {
        let digest = fields.digest();
        let path = self.entry_path(&digest);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(CacheCorruption {
                    key: digest[..16].to_string(),
                    reason: e.to_string(),
                })
            }
        };
        let corrupt = |reason: String| CacheCorruption {
            key: digest[..16].to_string(),
            reason,
        };
        let entry: CacheEntry =
            serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("unparseable: {e}")))?;
        if entry.key != digest || entry.key_fields.digest() != digest {
            return Err(corrupt("digest mismatch".into()));
        }
        if entry.texts.len() != fields.n_samples as usize {
            return Err(corrupt(format!(
                "expected {} texts, found {}",
                fields.n_samples,
                entry.texts.len()
            )));
        }
        Ok(Some(entry.texts))
    }

    pub fn put(&self, fields: &CacheKeyFields, texts: &[String]) -> std::io::Result<()> {
        let digest = fields.digest();
        let path = self.entry_path(&digest);
        let dir = path.parent().expect("entry has a parent");
        fs::create_dir_all(dir)?;
        let entry = CacheEntry {
            key: digest,
            key_fields: fields.clone(),
            texts: texts.to_vec(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer(&mut tmp, &entry)?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn remove(&self, fields: &CacheKeyFields) {
        let _ = fs::remove_file(self.entry_path(&fields.digest()));
    }

    /// Rebuilds the key index by scanning the directory tree. Sorted.
    pub fn scan_keys(&self) -> std::io::Result<Vec<String>> {
        let mut keys = Vec::new();
        for shard in fs::read_dir(&self.root)? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                continue;
            }
            for file in fs::read_dir(shard.path())? {
                let name = file?.file_name().to_string_lossy().into_owned();
                if let Some(stem) = name.strip_suffix(".json") {
                    keys.push(stem.to_string());
                }
            }
        }
        keys.sort();
        Ok(keys)
    }
}
