//! Annotation files and raw video tensors on disk.
//!
//! Annotation file (ActivityNet-style):
//!
//! ```json
//! {
//!   "version": "1.0",
//!   "labels": ["action_0", "action_1"],
//!   "database": {
//!     "synth_00000001": {
//!       "duration": 24.0,
//!       "annotations": [{"segment": [2.5, 6.0], "label": "action_1"}]
//!     }
//!   }
//! }
//! ```
//!
//! Video tensors are raw little-endian `f32` arrays (`<stem>.f32`) with a
//! sidecar JSON header (`<stem>.json`) holding `{T, H, W, channels, fps}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::VideoSample;
use crate::types::{ActionInstance, AnnotationSet};

pub const ANNOTATION_VERSION: &str = "1.0";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSegment {
    segment: [f64; 2],
    label: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEntry {
    duration: f64,
    annotations: Vec<FileSegment>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBody {
    labels: Vec<String>,
    database: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct VersionProbe {
    version: Option<String>,
}

/// Contents of an annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationFile {
    /// Class names; position is the class index.
    pub labels: Vec<String>,
    pub sets: Vec<AnnotationSet>,
}

/// Default class names `action_0 .. action_{n-1}`.
pub fn default_labels(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|c| format!("action_{c}")).collect()
}

pub fn annotations_to_json(sets: &[AnnotationSet], labels: &[String]) -> Result<serde_json::Value> {
    let mut db = serde_json::Map::new();
    for set in sets {
        let annotations = set
            .instances
            .iter()
            .map(|inst| {
                let label = labels.get(inst.label).ok_or_else(|| {
                    Error::invalid(format!("{}: label index {} has no name", set.video_id, inst.label))
                })?;
                Ok(FileSegment {
                    segment: [inst.start, inst.end],
                    label: label.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let entry = FileEntry {
            duration: set.duration,
            annotations,
        };
        db.insert(
            set.video_id.clone(),
            serde_json::to_value(entry).expect("plain struct serializes"),
        );
    }
    Ok(serde_json::json!({
        "version": ANNOTATION_VERSION,
        "labels": labels,
        "database": db,
    }))
}

pub fn annotations_from_str(text: &str, context: &str) -> Result<AnnotationFile> {
    let parse_err = |e: serde_json::Error| Error::Parse {
        context: context.to_string(),
        message: e.to_string(),
    };
    let probe: VersionProbe = serde_json::from_str(text).map_err(parse_err)?;
    match probe.version.as_deref() {
        Some(ANNOTATION_VERSION) => {}
        Some(v) => return Err(Error::SchemaVersion(v.to_string())),
        None => {
            return Err(Error::Parse {
                context: context.to_string(),
                message: "missing field `version`".into(),
            })
        }
    }
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("version");
    }
    let body: FileBody = serde_json::from_value(value).map_err(parse_err)?;
    let mut sets = Vec::with_capacity(body.database.len());
    for (video_id, raw) in body.database {
        let entry: FileEntry = serde_json::from_value(raw).map_err(|e| Error::Parse {
            context: format!("{context}: database.{video_id}"),
            message: e.to_string(),
        })?;
        let mut instances = Vec::with_capacity(entry.annotations.len());
        for (i, seg) in entry.annotations.iter().enumerate() {
            let label = body.labels.iter().position(|l| *l == seg.label).ok_or_else(|| Error::Parse {
                context: format!("{context}: database.{video_id}.annotations[{i}].label"),
                message: format!("unknown label {:?}", seg.label),
            })?;
            instances.push(ActionInstance::new(seg.segment[0], seg.segment[1], label));
        }
        sets.push(AnnotationSet::new(video_id, entry.duration, instances));
    }
    Ok(AnnotationFile {
        labels: body.labels,
        sets,
    })
}

/// Writes an annotation file.
pub fn save_annotations(sets: &[AnnotationSet], labels: &[String], path: &Path) -> Result<()> {
    let value = annotations_to_json(sets, labels)?;
    let text = serde_json::to_string_pretty(&value).expect("json value serializes");
    write_file(path, text.as_bytes())
}

/// Reads an annotation file written by [`save_annotations`] or any file
/// following the same schema.
pub fn load_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    annotations_from_str(&text, &path.display().to_string())
}

/// Sidecar header for a raw video tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub channels: usize,
    pub fps: f64,
}

fn sidecar_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f32"), stem.with_extension("json"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.f32` and `<stem>.json` for the video frames.
pub fn save_video(video: &VideoSample, stem: &Path) -> Result<()> {
    let (raw, header_path) = sidecar_paths(stem);
    let header = TensorHeader {
        frames: video.num_frames,
        height: video.height,
        width: video.width,
        channels: VideoSample::CHANNELS,
        fps: video.fps,
    };
    let bytes: Vec<u8> = video.frames.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_file(&raw, &bytes)?;
    write_file(
        &header_path,
        serde_json::to_string_pretty(&header).expect("header serializes").as_bytes(),
    )
}

/// Reads frames written by [`save_video`]. The returned sample carries the
/// given annotation and no recorded motion track.
pub fn load_video(stem: &Path, annotation: AnnotationSet) -> Result<VideoSample> {
    let (raw, header_path) = sidecar_paths(stem);
    let text = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: TensorHeader = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: header_path.display().to_string(),
        message: e.to_string(),
    })?;
    if header.channels != VideoSample::CHANNELS {
        return Err(Error::Parse {
            context: header_path.display().to_string(),
            message: format!("expected 3 channels, found {}", header.channels),
        });
    }
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = header.frames * header.channels * header.height * header.width * 4;
    if bytes.len() != expected {
        return Err(Error::Parse {
            context: raw.display().to_string(),
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let frames = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(VideoSample {
        frames,
        num_frames: header.frames,
        height: header.height,
        width: header.width,
        fps: header.fps,
        annotation,
        track: None,
    })
}
