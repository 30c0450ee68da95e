//! Content-addressed response cache.
//!
//! One file per request digest. Writes go through a temp file and rename,
//! so concurrent writers of the same key are benign and readers never see
//! partial content.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::BackendError;

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| BackendError::Cache(e.to_string()))?;
        Ok(Self { dir })
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.txt"))
    }

    pub fn get(&self, digest: &str) -> Result<Option<String>, BackendError> {
        match fs::read_to_string(self.path(digest)) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(BackendError::Cache(e.to_string())),
        }
    }

    pub fn put(&self, digest: &str, text: &str) -> Result<(), BackendError> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)
            .map_err(|e| BackendError::Cache(e.to_string()))?;
        tmp.write_all(text.as_bytes())
            .map_err(|e| BackendError::Cache(e.to_string()))?;
        tmp.persist(self.path(digest))
            .map_err(|e| BackendError::Cache(e.to_string()))?;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
