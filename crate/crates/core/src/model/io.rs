//! Line-delimited JSON I/O with a canonical byte form.
//!
//! Canonical form: one record per line, UTF-8, alphabetical key order at
//! every nesting level, floats rendered with their shortest round-trip
//! representation, absent optional fields omitted. `load` then `save` of a
//! canonical file reproduces it byte for byte.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use super::{AnnotatedMoment, DisturbedSet, MomentRecord, Validate};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: malformed record: {source}")]
    Malformed {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}:{line}: invariant violation: {message}")]
    Invariant {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("record not serializable: {0}")]
    Serialize(serde_json::Error),
}

/// Serialize one record to its canonical single-line form (no newline).
///
/// Routing through `serde_json::Value` sorts object keys alphabetically;
/// `serde_json` itself renders floats with the shortest representation that
/// round-trips.
pub fn canonical_line<T: Serialize>(record: &T) -> Result<String, DatasetError> {
    let value = serde_json::to_value(record).map_err(DatasetError::Serialize)?;
    serde_json::to_string(&value).map_err(DatasetError::Serialize)
}

/// Write records as canonical JSONL via a temp file and rename, so readers
/// never observe a partial file.
pub fn save_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    for record in records {
        buf.extend_from_slice(canonical_line(record)?.as_bytes());
        buf.push(b'\n');
    }
    atomic_write(path, &buf)
}

/// Atomic write-then-rename in the destination directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))
        .map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.flush().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Load and validate records from a JSONL file, reporting the 1-based line
/// number of the first malformed or invariant-violating record.
pub fn load_jsonl<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|source| DatasetError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            source,
        })?;
        record.validate().map_err(|message| DatasetError::Invariant {
            path: path.to_path_buf(),
            line: line_no,
            message,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Which record schema a dataset file carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetSchema {
    /// `moments.jsonl`: coarse input records.
    Coarse,
    /// `fig.jsonl`: annotated moments with candidates.
    Fig,
}

impl std::str::FromStr for DatasetSchema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coarse" => Ok(DatasetSchema::Coarse),
            "fig" => Ok(DatasetSchema::Fig),
            other => Err(format!("unknown schema {other:?}; expected coarse or fig")),
        }
    }
}

/// A loaded dataset of either schema.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Coarse(Vec<MomentRecord>),
    Fig(Vec<AnnotatedMoment>),
}

pub fn load_dataset(path: &Path, schema: DatasetSchema) -> Result<Dataset, DatasetError> {
    match schema {
        DatasetSchema::Coarse => Ok(Dataset::Coarse(load_jsonl(path)?)),
        DatasetSchema::Fig => Ok(Dataset::Fig(load_jsonl(path)?)),
    }
}

pub fn load_moments(path: &Path) -> Result<Vec<MomentRecord>, DatasetError> {
    load_jsonl(path)
}

pub fn save_moments(records: &[MomentRecord], path: &Path) -> Result<(), DatasetError> {
    save_jsonl(records, path)
}

pub fn load_annotated(path: &Path) -> Result<Vec<AnnotatedMoment>, DatasetError> {
    load_jsonl(path)
}

pub fn save_annotated(records: &[AnnotatedMoment], path: &Path) -> Result<(), DatasetError> {
    save_jsonl(records, path)
}

pub fn load_disturbed(path: &Path) -> Result<Vec<DisturbedSet>, DatasetError> {
    load_jsonl(path)
}

pub fn save_disturbed(records: &[DisturbedSet], path: &Path) -> Result<(), DatasetError> {
    save_jsonl(records, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Split;

    fn sample() -> MomentRecord {
        MomentRecord {
            video_id: "v1".into(),
            t_s: 0.0,
            t_e: 5.0,
            q: "a person runs".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn canonical_keys_are_alphabetical() {
        let line = canonical_line(&sample()).unwrap();
        assert_eq!(
            line,
            r#"{"q":"a person runs","split":"train","t_e":5.0,"t_s":0.0,"video_id":"v1"}"#
        );
    }

    #[test]
    fn load_reports_line_of_invariant_violation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            r#"{"q":"x","split":"train","t_e":5.0,"t_s":6.0,"video_id":"v1"}"#,
        )
        .unwrap();
        let err = load_moments(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":1:"), "line number reported: {msg}");
        assert!(msg.contains("t_s < t_e"), "invariant named: {msg}");
    }

    #[test]
    fn load_reports_line_of_malformed_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let good = canonical_line(&sample()).unwrap();
        fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let err = load_moments(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "line number: {err}");
    }

    #[test]
    fn empty_list_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        save_moments(&[], &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"");
    }

    #[test]
    fn score_half_renders_shortest() {
        use crate::model::{CaptionCandidate, CaptionKind};
        let mut c = CaptionCandidate::new("t", CaptionKind::Static);
        c.score = Some(0.5);
        let line = canonical_line(&c).unwrap();
        assert!(line.contains(r#""score":0.5"#), "{line}");
        assert!(!line.contains("filtered"), "false flag omitted: {line}");
    }

    #[test]
    fn save_then_load_round_trips_structurally() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = vec![sample()];
        save_moments(&records, &path).unwrap();
        let loaded = load_moments(&path).unwrap();
        assert_eq!(records, loaded);
        // second save is byte-identical
        let first = fs::read(&path).unwrap();
        save_moments(&loaded, &path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }
}
