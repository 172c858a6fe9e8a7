//! Annotation ingestion, video-level split checks, LabelMe import and phase
//! statistics.
//!
//! The manifest is a UTF-8 JSON-lines file. Each line is one record tagged by
//! `"type"`:
//!
//! ```text
//! {"type":"video","video_id":"v01","fps_sampled":0.2}
//! {"type":"split","train":["v01"],"test":["v02"]}
//! {"type":"sample","sample_id":"v01_0","video_id":"v01","frame_index":0, ...}
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. A split may also be
//! supplied from a separate file, which replaces any inline split record.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{bbox_from_pixels, BoundingBox, FrameSample, SurgicalPhase};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sample {sample_id}: {message}")]
    Validation { sample_id: String, message: String },
    #[error("split error for video {video_id}: {message}")]
    Split { video_id: String, message: String },
    #[error("no LabelMe box for {} sample(s): {}", .0.len(), .0.join(", "))]
    MissingBox(Vec<String>),
    #[error("{file}: shape {shape_type:?} is not a rectangle")]
    ShapeKind { file: PathBuf, shape_type: String },
    #[error("{file}: {message}")]
    LabelMe { file: PathBuf, message: String },
}

/// Per-video metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    /// Frames per second after downsampling.
    pub fps_sampled: f64,
    /// Declared number of samples; checked against the records when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_meta: Option<BTreeMap<String, serde_json::Value>>,
}

/// Video-level train/test partition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(alias = "train_video_ids")]
    pub train: BTreeSet<String>,
    #[serde(alias = "test_video_ids")]
    pub test: BTreeSet<String>,
}

/// Which part of a split a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSelector {
    Train,
    #[default]
    Test,
    All,
}

impl std::str::FromStr for SplitSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitSelector::Train),
            "test" => Ok(SplitSelector::Test),
            "all" => Ok(SplitSelector::All),
            other => Err(format!("unknown split {other:?}; expected train, test or all")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<FrameSample>,
    pub videos: Vec<VideoMeta>,
    pub split: SplitSpec,
}

/// A single invariant breach, as reported by [`check_manifest`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Validation { sample_id: String, message: String },
    Split { video_id: String, message: String },
    Video { video_id: String, message: String },
}

impl From<Violation> for DatasetError {
    fn from(v: Violation) -> Self {
        match v {
            Violation::Validation { sample_id, message } => {
                DatasetError::Validation { sample_id, message }
            }
            Violation::Split { video_id, message } => DatasetError::Split { video_id, message },
            Violation::Video { video_id, message } => DatasetError::Validation {
                sample_id: format!("<video {video_id}>"),
                message,
            },
        }
    }
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ManifestLine {
    Video(VideoMeta),
    Split(SplitSpec),
    Sample(Box<FrameSample>),
}

impl DatasetManifest {
    pub fn sample(&self, sample_id: &str) -> Option<&FrameSample> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoMeta> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    /// Samples belonging to the selected part of the split, ordered by id.
    pub fn select(&self, selector: SplitSelector) -> Vec<&FrameSample> {
        let mut out: Vec<&FrameSample> = self
            .records
            .iter()
            .filter(|r| match selector {
                SplitSelector::All => true,
                SplitSelector::Train => self.split.train.contains(&r.video_id),
                SplitSelector::Test => self.split.test.contains(&r.video_id),
            })
            .collect();
        out.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        out
    }

    pub fn count(&self, selector: SplitSelector) -> usize {
        self.select(selector).len()
    }

    /// Serialize back to the JSON-lines manifest format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for v in &self.videos {
            let mut value = serde_json::to_value(v).expect("video meta serializes");
            value["type"] = "video".into();
            out.push_str(&value.to_string());
            out.push('\n');
        }
        let mut split = serde_json::to_value(&self.split).expect("split serializes");
        split["type"] = "split".into();
        out.push_str(&split.to_string());
        out.push('\n');
        for r in &self.records {
            let mut value = serde_json::to_value(r).expect("sample serializes");
            value["type"] = "sample".into();
            out.push_str(&value.to_string());
            out.push('\n');
        }
        out
    }
}

fn read_file(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parse manifest text without checking cross-record invariants.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest, DatasetError> {
    let mut records = Vec::new();
    let mut videos = Vec::new();
    let mut split: Option<SplitSpec> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parsed: ManifestLine =
            serde_json::from_str(trimmed).map_err(|e| DatasetError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        match parsed {
            ManifestLine::Video(v) => videos.push(v),
            ManifestLine::Sample(s) => records.push(*s),
            ManifestLine::Split(s) => {
                if split.replace(s).is_some() {
                    return Err(DatasetError::Parse {
                        line: line_no,
                        message: "more than one split record".to_string(),
                    });
                }
            }
        }
    }
    Ok(DatasetManifest {
        records,
        videos,
        split: split.unwrap_or_default(),
    })
}

/// Parse a split document: `{"train": [...], "test": [...]}`.
pub fn parse_split(text: &str) -> Result<SplitSpec, DatasetError> {
    serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn load_split(path: &Path) -> Result<SplitSpec, DatasetError> {
    parse_split(&read_file(path)?)
}

/// Every invariant breach in `manifest`, in a stable order.
pub fn check_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut video_ids = BTreeSet::new();
    for v in &manifest.videos {
        if !video_ids.insert(v.video_id.as_str()) {
            out.push(Violation::Video {
                video_id: v.video_id.clone(),
                message: "duplicate video record".to_string(),
            });
        }
        if !(v.fps_sampled.is_finite() && v.fps_sampled > 0.0) {
            out.push(Violation::Video {
                video_id: v.video_id.clone(),
                message: format!("fps_sampled must be positive, got {}", v.fps_sampled),
            });
        }
    }

    let mut seen = BTreeSet::new();
    let mut per_video: HashMap<&str, usize> = HashMap::new();
    for r in &manifest.records {
        if !seen.insert(r.sample_id.as_str()) {
            out.push(Violation::Validation {
                sample_id: r.sample_id.clone(),
                message: "duplicate sample_id".to_string(),
            });
        }
        for message in r.violations() {
            out.push(Violation::Validation {
                sample_id: r.sample_id.clone(),
                message,
            });
        }
        if !video_ids.contains(r.video_id.as_str()) {
            out.push(Violation::Validation {
                sample_id: r.sample_id.clone(),
                message: format!("video {} has no video record", r.video_id),
            });
        }
        *per_video.entry(r.video_id.as_str()).or_default() += 1;
    }
    for v in &manifest.videos {
        if let Some(declared) = v.n_samples {
            let actual = per_video.get(v.video_id.as_str()).copied().unwrap_or(0);
            if declared != actual {
                out.push(Violation::Video {
                    video_id: v.video_id.clone(),
                    message: format!("declares {declared} samples but has {actual}"),
                });
            }
        }
    }

    let split = &manifest.split;
    for id in split.train.intersection(&split.test) {
        out.push(Violation::Split {
            video_id: id.clone(),
            message: "video is in both train and test".to_string(),
        });
    }
    let referenced: BTreeSet<&str> = manifest.records.iter().map(|r| r.video_id.as_str()).collect();
    for id in referenced {
        if !split.train.contains(id) && !split.test.contains(id) {
            out.push(Violation::Split {
                video_id: id.to_string(),
                message: "video is in neither train nor test".to_string(),
            });
        }
    }
    out
}

/// Parse and fully validate a manifest held in memory.
pub fn manifest_from_str(
    text: &str,
    split_override: Option<SplitSpec>,
) -> Result<DatasetManifest, DatasetError> {
    let mut manifest = parse_manifest(text)?;
    if let Some(split) = split_override {
        manifest.split = split;
    }
    // split breaches outrank per-sample ones so callers see the cause first
    let mut violations = check_manifest(&manifest);
    violations.sort_by_key(|v| !matches!(v, Violation::Split { .. }));
    match violations.into_iter().next() {
        Some(v) => Err(v.into()),
        None => Ok(manifest),
    }
}

/// Load and validate a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    manifest_from_str(&read_file(path)?, None)
}

/// Load a manifest, replacing its split with the one in `split_path`.
pub fn load_manifest_with_split(
    path: &Path,
    split_path: Option<&Path>,
) -> Result<DatasetManifest, DatasetError> {
    let split = split_path.map(load_split).transpose()?;
    manifest_from_str(&read_file(path)?, split)
}

#[derive(Deserialize)]
struct LabelMeFile {
    #[serde(default)]
    shapes: Vec<LabelMeShape>,
    #[serde(rename = "imageWidth")]
    image_width: u32,
    #[serde(rename = "imageHeight")]
    image_height: u32,
}

#[derive(Deserialize)]
struct LabelMeShape {
    #[serde(default)]
    points: Vec<[f64; 2]>,
    #[serde(default = "default_shape_type")]
    shape_type: String,
}

fn default_shape_type() -> String {
    // LabelMe omits shape_type for polygons in old versions
    "polygon".to_string()
}

/// Split a `<video_id>_<frame_index>` stem on its last underscore.
fn parse_frame_stem(stem: &str) -> Option<(&str, u64)> {
    let (video, frame) = stem.rsplit_once('_')?;
    if video.is_empty() {
        return None;
    }
    Some((video, frame.parse().ok()?))
}

/// Read one LabelMe file and convert its rectangle into the canonical grid.
///
/// Returns `Ok(None)` for files that contain no shapes at all.
pub fn read_labelme_box(path: &Path) -> Result<Option<(BoundingBox, u32, u32)>, DatasetError> {
    let text = read_file(path)?;
    let file: LabelMeFile = serde_json::from_str(&text).map_err(|e| DatasetError::LabelMe {
        file: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(bad) = file.shapes.iter().find(|s| s.shape_type != "rectangle") {
        return Err(DatasetError::ShapeKind {
            file: path.to_path_buf(),
            shape_type: bad.shape_type.clone(),
        });
    }
    let Some(shape) = file.shapes.first() else {
        return Ok(None);
    };
    let [p, q] = shape.points.as_slice() else {
        return Err(DatasetError::LabelMe {
            file: path.to_path_buf(),
            message: format!("rectangle needs 2 points, found {}", shape.points.len()),
        });
    };
    let (w, h) = (file.image_width, file.image_height);
    // LabelMe may record corners slightly outside the image
    let clamp_x = |v: f64| v.clamp(0.0, f64::from(w));
    let clamp_y = |v: f64| v.clamp(0.0, f64::from(h));
    let b = bbox_from_pixels(
        clamp_x(p[0].min(q[0])),
        clamp_y(p[1].min(q[1])),
        clamp_x(p[0].max(q[0])),
        clamp_y(p[1].max(q[1])),
        w,
        h,
    )
    .map_err(|e| DatasetError::LabelMe {
        file: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(Some((b, w, h)))
}

/// Populate go-zone boxes from a directory of LabelMe files named
/// `<video_id>_<frame_index>.json`.
///
/// Files that match no sample are ignored. Every sample must end up with a
/// box; the ones that don't are reported together in
/// [`DatasetError::MissingBox`].
pub fn import_labelme(dir: &Path, manifest: &DatasetManifest) -> Result<DatasetManifest, DatasetError> {
    let entries = fs::read_dir(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();

    let index: HashMap<(&str, u64), usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.video_id.as_str(), r.frame_index), i))
        .collect();

    let mut found: HashMap<usize, (BoundingBox, u32, u32)> = HashMap::new();
    for path in &paths {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Some(key) = parse_frame_stem(stem) else {
            continue;
        };
        let Some(&i) = index.get(&key) else {
            continue;
        };
        if let Some(entry) = read_labelme_box(path)? {
            found.insert(i, entry);
        }
    }

    let missing: Vec<String> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| !found.contains_key(i))
        .map(|(_, r)| r.sample_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(DatasetError::MissingBox(missing));
    }

    let mut out = manifest.clone();
    for (i, (b, w, h)) in found {
        let r = &mut out.records[i];
        r.go_zone = b;
        r.image_width_px = w;
        r.image_height_px = h;
    }
    Ok(out)
}

/// Phase occurrence, duration and transition summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStatistics {
    /// Number of segments per phase.
    pub occurrence_counts: BTreeMap<SurgicalPhase, usize>,
    /// Segment durations in seconds per phase.
    pub duration_seconds: BTreeMap<SurgicalPhase, Vec<f64>>,
    /// `transition_counts[from][to]`, indexed in letter order.
    pub transition_counts: [[usize; 4]; 4],
    pub n_segments: usize,
    pub n_videos: usize,
}

impl PhaseStatistics {
    pub fn transitions(&self, from: SurgicalPhase, to: SurgicalPhase) -> usize {
        self.transition_counts[from.index()][to.index()]
    }

    pub fn total_transitions(&self) -> usize {
        self.transition_counts.iter().flatten().sum()
    }
}

/// Segment each video into maximal same-phase runs and count transitions
/// between consecutive runs.
///
/// Records are sorted by `(video_id, frame_index)` internally. Transitions are
/// never counted across videos.
pub fn compute_phase_stats(manifest: &DatasetManifest) -> PhaseStatistics {
    let fps: HashMap<&str, f64> = manifest
        .videos
        .iter()
        .map(|v| (v.video_id.as_str(), v.fps_sampled))
        .collect();

    let mut frames: Vec<(&str, u64, SurgicalPhase)> = manifest
        .records
        .iter()
        .map(|r| (r.video_id.as_str(), r.frame_index, r.phase))
        .collect();
    frames.sort();

    let mut occurrence_counts: BTreeMap<SurgicalPhase, usize> =
        SurgicalPhase::ALL.iter().map(|&p| (p, 0)).collect();
    let mut duration_seconds: BTreeMap<SurgicalPhase, Vec<f64>> =
        SurgicalPhase::ALL.iter().map(|&p| (p, Vec::new())).collect();
    let mut transition_counts = [[0usize; 4]; 4];
    let mut n_segments = 0;
    let mut n_videos = 0;

    for video in frames.chunk_by(|a, b| a.0 == b.0) {
        n_videos += 1;
        let rate = fps.get(video[0].0).copied().unwrap_or(1.0);
        let mut previous: Option<SurgicalPhase> = None;
        for run in video.chunk_by(|a, b| a.2 == b.2) {
            let phase = run[0].2;
            n_segments += 1;
            *occurrence_counts.entry(phase).or_default() += 1;
            duration_seconds
                .entry(phase)
                .or_default()
                .push(run.len() as f64 / rate);
            if let Some(prev) = previous {
                transition_counts[prev.index()][phase.index()] += 1;
            }
            previous = Some(phase);
        }
    }

    PhaseStatistics {
        occurrence_counts,
        duration_seconds,
        transition_counts,
        n_segments,
        n_videos,
    }
}

/// Demographic keys and how many videos carry each value.
pub fn summarize_patient_meta(manifest: &DatasetManifest) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for v in &manifest.videos {
        for (k, val) in v.patient_meta.iter().flatten() {
            let rendered = match val {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            *out.entry(k.clone()).or_default().entry(rendered).or_default() += 1;
        }
    }
    out
}
