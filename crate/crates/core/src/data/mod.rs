//! Dataset ingestion, clip sampling and evaluation-clip arrangement.
//!
//! Layout on disk:
//!
//! ```text
//! frames/<video_id>/<index:06d>.png
//! annotations/<video_id>.txt    header line, then one label per frame (-1 = unannotated)
//! ```

mod clips;
mod frame;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub use clips::{
    eval_windows, load_clip, make_eval_clips, sample_training_clip, Clip, ClipSampler, ClipWindow,
    EvalWindow,
};
pub use frame::{denormalize_frame, load_frame, normalize_frame, read_rgb, CHANNEL_MEAN, CHANNEL_STD};
pub use synth::{generate_synth, render_class_pattern, SynthSpec};

use crate::error::{Error, Result};
use crate::sequence::NUM_CLASSES;

/// Frames per clip.
pub const CLIP_LEN: usize = 8;

pub const ANNOTATION_HEADER: &str = "Neutral,Anger,Disgust,Fear,Happiness,Sadness,Surprise";

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub frame_paths: Vec<PathBuf>,
    pub labels: Vec<i64>,
    /// An image file exists for the frame.
    pub has_image: Vec<bool>,
    /// `label >= 0` and the image exists.
    pub valid: Vec<bool>,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Start indices of every window of `CLIP_LEN` consecutive valid frames.
    pub fn valid_windows(&self) -> Vec<usize> {
        let mut starts = Vec::new();
        let mut run = 0;
        for (i, &v) in self.valid.iter().enumerate() {
            run = if v { run + 1 } else { 0 };
            if run >= CLIP_LEN {
                starts.push(i + 1 - CLIP_LEN);
            }
        }
        starts
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    /// Sorted by video id.
    pub videos: Vec<VideoRecord>,
    /// `(video_id, reason)` for each video that failed validation.
    pub rejected: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn valid_frames(&self) -> usize {
        self.videos.iter().map(VideoRecord::valid_count).sum()
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Parses an annotation file body. Errors describe the first offending line.
pub fn parse_annotations(text: &str) -> std::result::Result<Vec<i64>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == ANNOTATION_HEADER => {}
        Some(h) => return Err(format!("bad header {h:?}")),
        None => return Err("empty annotation file".into()),
    }
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: i64 = line
            .parse()
            .map_err(|_| format!("line {}: malformed integer {line:?}", n + 2))?;
        if v < -1 || v >= NUM_CLASSES as i64 {
            return Err(format!("line {}: label {v} outside -1..{}", n + 2, NUM_CLASSES - 1));
        }
        labels.push(v);
    }
    Ok(labels)
}

/// Maps frame index → path for every `NNNNNN.png` in `dir`.
pub fn scan_frames(dir: &Path) -> Result<BTreeMap<usize, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if let Ok(i) = stem.parse::<usize>() {
            out.insert(i, path);
        }
    }
    Ok(out)
}

fn load_video(frames_root: &Path, id: &str, annotation: &Path) -> std::result::Result<VideoRecord, String> {
    let text = fs::read_to_string(annotation).map_err(|e| format!("unreadable annotation: {e}"))?;
    let labels = parse_annotations(&text)?;
    let dir = frames_root.join(id);
    if !dir.is_dir() {
        return Err(format!("no frame directory {}", dir.display()));
    }
    let images = scan_frames(&dir).map_err(|e| e.to_string())?;
    let declared = images.keys().next_back().map_or(0, |&i| i + 1);
    if declared > labels.len() {
        return Err(format!(
            "{} annotation lines but frames up to index {}",
            labels.len(),
            declared - 1
        ));
    }
    let frame_paths: Vec<PathBuf> = (0..labels.len()).map(|i| dir.join(frame_file_name(i))).collect();
    let has_image: Vec<bool> = (0..labels.len()).map(|i| images.contains_key(&i)).collect();
    let valid = labels.iter().zip(&has_image).map(|(&l, &h)| l >= 0 && h).collect();
    Ok(VideoRecord {
        video_id: id.to_string(),
        frame_paths,
        labels,
        has_image,
        valid,
    })
}

/// Loads every annotated video. Per-video problems are collected in
/// [`Dataset::rejected`]; only an unreadable annotations root is an error.
pub fn load_dataset(frames_root: &Path, annotations_root: &Path) -> Result<Dataset> {
    let mut ds = Dataset::default();
    let entries = fs::read_dir(annotations_root).map_err(|e| Error::io(annotations_root, e))?;
    let mut ids = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(annotations_root, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        if let Some(id) = path.file_stem().and_then(|s| s.to_str()) {
            ids.insert(id.to_string(), path.clone());
        }
    }
    if ids.is_empty() {
        ds.warnings
            .push(format!("no annotation files in {}", annotations_root.display()));
    }
    for (id, path) in ids {
        match load_video(frames_root, &id, &path) {
            Ok(v) => ds.videos.push(v),
            Err(reason) => ds.rejected.push((id, reason)),
        }
    }
    for (id, reason) in &ds.rejected {
        ds.warnings.push(format!("rejected video {id}: {reason}"));
    }
    Ok(ds)
}

/// Loads `<root>/frames` and `<root>/annotations`.
pub fn load_dataset_root(root: &Path) -> Result<Dataset> {
    load_dataset(&root.join("frames"), &root.join("annotations"))
}
