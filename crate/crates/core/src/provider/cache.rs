//! Content-addressed response cache.
//!
//! Layout: `cache_dir/<2-char digest prefix>/<digest>.json`, each entry
//! holding `{request_digest, model, texts, created_at}`. Writes go through a
//! temp file and rename; identical keys always carry identical values, so
//! last-write-wins between concurrent writers is benign.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

static WRITE_SEQ: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub model: String,
    pub texts: Vec<String>,
    pub created_at: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &std::path::Path {
        &self.dir
    }

    fn entry_path(&self, digest: &str) -> PathBuf {
        let prefix = &digest[..2.min(digest.len())];
        self.dir.join(prefix).join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Option<CacheEntry> {
        let bytes = std::fs::read(self.entry_path(digest)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.entry_path(digest).is_file()
    }

    pub fn put(&self, digest: &str, model: &str, texts: &[String]) -> std::io::Result<()> {
        let entry = CacheEntry {
            request_digest: digest.to_string(),
            model: model.to_string(),
            texts: texts.to_vec(),
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let path = self.entry_path(digest);
        let parent = path.parent().expect("entry path has a parent");
        std::fs::create_dir_all(parent)?;
        // Unique temp name per writer: concurrent puts of the same key must
        // not share a temp file (their timestamps differ).
        let tmp = parent.join(format!(
            ".{digest}.tmp-{}-{}",
            std::process::id(),
            WRITE_SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, serde_json::to_vec(&entry)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}
