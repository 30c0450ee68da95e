//! Stage manifests: input digests, config digest, and per-moment outcomes.
//!
//! A stage whose manifest matches the current inputs and config is a no-op
//! unless forced, which makes every stage resumable and re-runnable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::io::atomic_write;

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_digest: String,
    /// Input path → content digest.
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Moment key → `ok` or `skipped: <reason>`.
    pub moments: BTreeMap<String, String>,
}

pub fn manifest_path(first_output: &Path) -> PathBuf {
    let mut name = first_output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    first_output.with_file_name(name)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Content digest of a file, or of a directory as the sorted list of
/// (relative path, file digest) pairs.
pub fn digest_path(path: &Path) -> Result<String, PipelineError> {
    if path.is_dir() {
        let mut entries: Vec<(String, PathBuf)> = Vec::new();
        collect_files(path, path, &mut entries)?;
        entries.sort();
        let mut hasher = Sha256::new();
        for (rel, file) in entries {
            hasher.update(rel.as_bytes());
            hasher.update([0]);
            let bytes = std::fs::read(&file).map_err(io_err(&file))?;
            hasher.update(Sha256::digest(&bytes));
        }
        Ok(hex::encode(hasher.finalize()))
    } else {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

fn collect_files(
    root: &Path,
    dir: &Path,
    out: &mut Vec<(String, PathBuf)>,
) -> Result<(), PipelineError> {
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .unwrap_or(&path)
                .to_string_lossy()
                .into_owned();
            out.push((rel, path));
        }
    }
    Ok(())
}

pub fn digest_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>, PipelineError> {
    paths
        .iter()
        .map(|p| Ok((p.to_string_lossy().into_owned(), digest_path(p)?)))
        .collect()
}

pub fn load_manifest(path: &Path) -> Option<StageManifest> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn save_manifest(manifest: &StageManifest, path: &Path) -> Result<(), PipelineError> {
    let value = serde_json::to_value(manifest)
        .map_err(|e| PipelineError::Manifest(e.to_string()))?;
    let mut bytes =
        serde_json::to_vec_pretty(&value).map_err(|e| PipelineError::Manifest(e.to_string()))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(|e| PipelineError::Manifest(e.to_string()))
}

/// A stage is a no-op when the previous manifest has the same stage name,
/// config digest, and input digests, and every recorded output still exists.
pub fn is_no_op(
    previous: &StageManifest,
    stage: &str,
    config_digest: &str,
    input_digests: &BTreeMap<String, String>,
) -> bool {
    previous.stage == stage
        && previous.config_digest == config_digest
        && previous.input_digests == *input_digests
        && previous
            .outputs
            .iter()
            .all(|o| Path::new(o).exists())
}
