use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::util::sha256_parts;

pub type CacheKey = [u8; 32];

pub fn cache_key(backend_id: &str, model_tag: &str, text: &str) -> CacheKey {
    sha256_parts(&[backend_id.as_bytes(), model_tag.as_bytes(), text.as_bytes()])
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    value: String,
}

/// Append-only key/value store for translations.
///
/// Readers share an in-memory map; writes are serialized and appended to the
/// backing file one JSON line at a time. On reopen the file is replayed and
/// the last value for a key wins. A torn final line is ignored.
pub struct TranslationCache {
    map: RwLock<HashMap<CacheKey, String>>,
    log: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl TranslationCache {
    pub fn in_memory() -> Self {
        Self {
            map: RwLock::new(HashMap::new()),
            log: None,
            path: None,
        }
    }

    pub fn open(path: &Path) -> io::Result<Self> {
        let mut map = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                let parsed = serde_json::from_str::<Entry>(&line)
                    .ok()
                    .and_then(|e| Some((decode_key(&e.key)?, e.value)));
                match parsed {
                    Some((key, value)) => {
                        map.insert(key, value);
                    }
                    None => warn!(
                        "{}:{}: skipping unreadable cache line",
                        path.display(),
                        lineno + 1
                    ),
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let len = file.metadata()?.len();
        if len > 0 {
            let bytes = std::fs::read(path)?;
            if bytes.last() != Some(&b'\n') {
                file.write_all(b"\n")?;
            }
        }
        Ok(Self {
            map: RwLock::new(map),
            log: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &CacheKey) -> Option<String> {
        self.map.read().expect("cache lock poisoned").get(key).cloned()
    }

    pub fn insert(&self, key: CacheKey, value: String) -> io::Result<()> {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_string(&Entry {
                key: hex::encode(key),
                value: value.clone(),
            })?;
            line.push('\n');
            let mut file = log.lock().expect("cache log poisoned");
            file.write_all(line.as_bytes())?;
        }
        self.map.write().expect("cache lock poisoned").insert(key, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn decode_key(hex_key: &str) -> Option<CacheKey> {
    hex::decode(hex_key).ok()?.try_into().ok()
}
