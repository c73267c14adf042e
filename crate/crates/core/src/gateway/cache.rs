//! Append-only JSONL caches for completions and embeddings.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::rng::digest_parts;

#[derive(Serialize, Deserialize)]
struct Entry<V> {
    key: String,
    value: V,
}

/// Key-value store with concurrent readers. When backed by a file, every
/// insert appends one line and flushes it.
struct JsonlStore<V> {
    map: RwLock<HashMap<String, V>>,
    file: Mutex<Option<File>>,
}

impl<V: Clone + Serialize + DeserializeOwned> JsonlStore<V> {
    fn in_memory() -> Self {
        Self {
            map: RwLock::new(HashMap::new()),
            file: Mutex::new(None),
        }
    }

    fn open(path: &Path) -> Result<Self, GatewayError> {
        let io = |e: std::io::Error| GatewayError::Io(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut map = HashMap::new();
        let mut needs_newline = false;
        if path.exists() {
            let body = std::fs::read_to_string(path).map_err(io)?;
            needs_newline = !body.is_empty() && !body.ends_with('\n');
            for (i, line) in body.lines().enumerate() {
                match serde_json::from_str::<Entry<V>>(line) {
                    Ok(e) => {
                        map.insert(e.key, e.value);
                    }
                    // a torn final line from an interrupted write is skipped
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache entry: {e}", path.display(), i + 1),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if needs_newline {
            file.write_all(b"\n").map_err(io)?;
        }
        Ok(Self {
            map: RwLock::new(map),
            file: Mutex::new(Some(file)),
        })
    }

    fn get(&self, key: &str) -> Option<V> {
        self.map.read().expect("cache lock").get(key).cloned()
    }

    fn insert(&self, key: &str, value: &V) -> Result<(), GatewayError> {
        let mut file = self.file.lock().expect("cache lock");
        if let Some(f) = file.as_mut() {
            let mut line = serde_json::to_string(&Entry {
                key: key.to_string(),
                value: value.clone(),
            })
            .map_err(|e| GatewayError::Io(e.to_string()))?;
            line.push('\n');
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| GatewayError::Io(e.to_string()))?;
        }
        self.map.write().expect("cache lock").insert(key.to_string(), value.clone());
        Ok(())
    }

    fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }
}

/// Completion cache keyed by request digest.
pub struct ResponseCache(JsonlStore<String>);

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self(JsonlStore::in_memory())
    }

    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        JsonlStore::open(path).map(Self)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.0.get(key)
    }

    pub fn insert(&self, key: &str, value: &str) -> Result<(), GatewayError> {
        self.0.insert(key, &value.to_string())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Embedding cache. One record per entry: `{"key": <hex digest of model id
/// and text>, "value": [f64, ...]}`.
pub struct EmbeddingCache(JsonlStore<Vec<f64>>);

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self(JsonlStore::in_memory())
    }

    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        JsonlStore::open(path).map(Self)
    }

    pub fn key(model_id: &str, text: &str) -> String {
        digest_parts([model_id, text])
    }

    pub fn get(&self, key: &str) -> Option<Vec<f64>> {
        self.0.get(key)
    }

    pub fn insert(&self, key: &str, value: &[f64]) -> Result<(), GatewayError> {
        self.0.insert(key, &value.to_vec())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
