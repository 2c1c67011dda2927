use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::request::{Frame, FrameMeta};

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("{path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
}

pub fn snapshot_stem(frame_index: u64) -> String {
    format!("snapshot_{frame_index:08}")
}

/// Writes `snapshot_NNNNNNNN.png` and a `.json` sidecar describing how the
/// frame was made. Returns the PNG path.
pub fn write_snapshot(frame: &Frame, dir: &Path) -> Result<PathBuf, SnapshotError> {
    let stem = snapshot_stem(frame.frame_index);
    let png = dir.join(format!("{stem}.png"));
    let sidecar = dir.join(format!("{stem}.json"));
    let fail = |path: &Path, message: String| SnapshotError::Write {
        path: path.to_owned(),
        message,
    };
    fs::create_dir_all(dir).map_err(|e| fail(dir, e.to_string()))?;
    frame.image.save_png(&png).map_err(|e| fail(&png, e.to_string()))?;
    let mut text = serde_json::to_string_pretty(frame.meta.as_ref()).map_err(|e| fail(&sidecar, e.to_string()))?;
    text.push('\n');
    fs::write(&sidecar, text).map_err(|e| fail(&sidecar, e.to_string()))?;
    Ok(png)
}

/// Reads the sidecar written next to a snapshot PNG.
pub fn read_sidecar(png: &Path) -> Result<FrameMeta, SnapshotError> {
    let path = png.with_extension("json");
    let fail = |message: String| SnapshotError::Read {
        path: path.clone(),
        message,
    };
    let text = fs::read_to_string(&path).map_err(|e| fail(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| fail(e.to_string()))
}

/// Fires every `interval` seconds, first at `start + interval`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotTimer {
    interval: f64,
    next: Option<f64>,
}

impl SnapshotTimer {
    pub fn new(interval: f64) -> Self {
        SnapshotTimer { interval, next: None }
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }

    /// True when a snapshot is due at `t`. Missed slots are not made up.
    pub fn due(&mut self, t: f64) -> bool {
        let next = *self.next.get_or_insert(t + self.interval);
        if t < next {
            return false;
        }
        let mut n = next;
        while n <= t {
            n += self.interval;
        }
        self.next = Some(n);
        true
    }
}
