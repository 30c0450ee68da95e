//! Frame ingestion.
//!
//! Frames live on disk as `frames/<video_id>/<timestamp_ms>.png`. A provider
//! turns a moment key into the ordered [`FrameSequence`] of frames inside the
//! span. An optional helper shells out to an external decoder binary to
//! populate the layout from a source video.

use std::path::{Path, PathBuf};
use std::process::Command;

use crate::model::{FrameHandle, FrameSequence, MomentKey, TimedFrame};

use super::KeyframeError;

pub trait FrameProvider: Send + Sync {
    fn frames_for(&self, key: &MomentKey) -> Result<FrameSequence, KeyframeError>;
}

/// Reads the `frames/<video_id>/<timestamp_ms>.png` layout.
#[derive(Debug, Clone)]
pub struct DirFrameProvider {
    root: PathBuf,
}

impl DirFrameProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl FrameProvider for DirFrameProvider {
    fn frames_for(&self, key: &MomentKey) -> Result<FrameSequence, KeyframeError> {
        let dir = self.root.join(&key.video_id);
        let entries = std::fs::read_dir(&dir)
            .map_err(|e| KeyframeError::Provider(format!("{}: {e}", dir.display())))?;
        let mut frames: Vec<(u64, PathBuf)> = Vec::new();
        for entry in entries {
            let entry =
                entry.map_err(|e| KeyframeError::Provider(format!("{}: {e}", dir.display())))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let Ok(ms) = stem.parse::<u64>() else {
                continue;
            };
            frames.push((ms, path));
        }
        frames.sort_by_key(|(ms, _)| *ms);
        frames.dedup_by_key(|(ms, _)| *ms);
        let timed: Vec<TimedFrame> = frames
            .into_iter()
            .map(|(ms, path)| TimedFrame {
                timestamp: ms as f64 / 1000.0,
                handle: FrameHandle::File(path),
            })
            .filter(|f| f.timestamp >= key.t_s && f.timestamp <= key.t_e)
            .collect();
        FrameSequence::new(key.clone(), timed).map_err(KeyframeError::Provider)
    }
}

/// In-memory provider for tests and synthetic fixtures.
pub struct MapFrameProvider {
    map: std::collections::HashMap<MomentKey, FrameSequence>,
}

impl MapFrameProvider {
    pub fn new(sequences: impl IntoIterator<Item = FrameSequence>) -> Self {
        Self {
            map: sequences
                .into_iter()
                .map(|s| (s.key().clone(), s))
                .collect(),
        }
    }
}

impl FrameProvider for MapFrameProvider {
    fn frames_for(&self, key: &MomentKey) -> Result<FrameSequence, KeyframeError> {
        self.map
            .get(key)
            .cloned()
            .ok_or_else(|| KeyframeError::Provider(format!("no frames for {key}")))
    }
}

/// Run an external decoder to populate `out_dir` with the frame layout.
/// Argument templates may reference `{input}`, `{outdir}` and `{fps}`.
pub fn extract_frames(
    decoder: &Path,
    args_template: &[String],
    video: &Path,
    out_dir: &Path,
    fps: f64,
) -> Result<(), KeyframeError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| KeyframeError::Provider(format!("{}: {e}", out_dir.display())))?;
    let args: Vec<String> = args_template
        .iter()
        .map(|a| {
            a.replace("{input}", &video.to_string_lossy())
                .replace("{outdir}", &out_dir.to_string_lossy())
                .replace("{fps}", &fps.to_string())
        })
        .collect();
    let output = Command::new(decoder)
        .args(&args)
        .output()
        .map_err(|e| KeyframeError::Provider(format!("{}: {e}", decoder.display())))?;
    if !output.status.success() {
        return Err(KeyframeError::Decoder {
            status: output.status.code().unwrap_or(-1),
            detail: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn write_png(path: &Path) {
        RgbImage::new(2, 2).save(path).unwrap();
    }

    #[test]
    fn dir_provider_orders_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let vdir = dir.path().join("v1");
        std::fs::create_dir_all(&vdir).unwrap();
        for ms in [2500u64, 500, 1500, 9000] {
            write_png(&vdir.join(format!("{ms}.png")));
        }
        std::fs::write(vdir.join("notaframe.txt"), b"x").unwrap();
        let provider = DirFrameProvider::new(dir.path());
        let key = MomentKey {
            video_id: "v1".into(),
            t_s: 0.4,
            t_e: 3.0,
        };
        let seq = provider.frames_for(&key).unwrap();
        let ts: Vec<f64> = seq.frames().iter().map(|f| f.timestamp).collect();
        assert_eq!(ts, vec![0.5, 1.5, 2.5]);
    }

    #[test]
    fn missing_video_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let provider = DirFrameProvider::new(dir.path());
        let key = MomentKey {
            video_id: "absent".into(),
            t_s: 0.0,
            t_e: 1.0,
        };
        assert!(provider.frames_for(&key).is_err());
    }

    #[cfg(unix)]
    #[test]
    fn extract_frames_substitutes_and_runs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("frames/v1");
        let marker = dir.path().join("invoked.txt");
        let args = vec![
            "-c".to_string(),
            format!("echo \"$0 $1\" > {}", marker.display()),
            "{input}".to_string(),
            "{fps}".to_string(),
        ];
        extract_frames(Path::new("/bin/sh"), &args, Path::new("video.mp4"), &out, 8.0).unwrap();
        let recorded = std::fs::read_to_string(&marker).unwrap();
        assert!(recorded.contains("video.mp4"));
        assert!(recorded.contains('8'));
        assert!(out.exists());
    }
}
