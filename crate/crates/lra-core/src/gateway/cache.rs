//! Content-addressed persistent response cache.
//!
//! The cache key is a SHA-256 digest over every field that can change a
//! backend's output: model name, prompt, forced continuation, image
//! reference, and effective sampling parameters. Each field is
//! length-prefixed before hashing so that moving a byte across a field
//! boundary ("ab"/"c" vs "a"/"bc") always changes the digest.
//!
//! On disk the cache is append-only JSONL. Entries are loaded into memory
//! at open; writes go to the map and the file under a writer lock. A torn
//! final line (crash mid-append) is skipped on load rather than poisoning
//! the whole cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

use super::CompletionResult;

/// One persisted cache record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub result: CompletionResult,
    /// Seconds since the Unix epoch at write time; informational only.
    pub created_at: u64,
}

fn hash_field(hasher: &mut Sha256, bytes: &[u8]) {
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
}

fn hash_optional(hasher: &mut Sha256, value: Option<&str>) {
    match value {
        Some(v) => {
            hasher.update([1u8]);
            hash_field(hasher, v.as_bytes());
        }
        None => hasher.update([0u8]),
    }
}

/// Deterministic cache key over everything that identifies a completion.
pub fn cache_key(
    model_name: &str,
    prompt: &str,
    forced_continuation: Option<&str>,
    image_ref: Option<&str>,
    temperature: f64,
    max_tokens: u32,
) -> String {
    let mut hasher = Sha256::new();
    hash_field(&mut hasher, model_name.as_bytes());
    hash_field(&mut hasher, prompt.as_bytes());
    hash_optional(&mut hasher, forced_continuation);
    hash_optional(&mut hasher, image_ref);
    hasher.update(temperature.to_bits().to_le_bytes());
    hasher.update(max_tokens.to_le_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub(super) struct Cache {
    map: RwLock<HashMap<String, CompletionResult>>,
    writer: Option<Mutex<File>>,
}

impl Cache {
    /// Open (or create) the cache file and load existing entries.
    pub(super) fn open(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        let writer = match path {
            Some(path) => {
                if path.exists() {
                    let raw = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
                    for line in raw.lines() {
                        if line.trim().is_empty() {
                            continue;
                        }
                        // Later entries for the same key win, matching
                        // append order.
                        if let Ok(entry) = serde_json::from_str::<CacheEntry>(line) {
                            map.insert(entry.key, entry.result);
                        }
                    }
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::file(path, e))?;
                Some(Mutex::new(file))
            }
            None => None,
        };
        Ok(Cache {
            map: RwLock::new(map),
            writer,
        })
    }

    pub(super) fn get(&self, key: &str) -> Option<CompletionResult> {
        self.map.read().expect("cache lock").get(key).cloned()
    }

    pub(super) fn put(&self, key: &str, result: &CompletionResult) -> Result<()> {
        // A stored result is never itself a hit; the flag is set on read.
        let mut stored = result.clone();
        stored.cache_hit = false;
        self.map
            .write()
            .expect("cache lock")
            .insert(key.to_string(), stored.clone());
        if let Some(writer) = &self.writer {
            let entry = CacheEntry {
                key: key.to_string(),
                result: stored,
                created_at: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let line = serde_json::to_string(&entry)
                .map_err(|e| Error::Config(format!("cache entry serialization: {e}")))?;
            let mut file = writer.lock().expect("cache writer lock");
            writeln!(file, "{line}").map_err(|e| Error::Config(format!("cache append: {e}")))?;
        }
        Ok(())
    }
}
