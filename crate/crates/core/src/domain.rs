//! Core vocabulary: phases, boxes, annotated samples, parsed model outputs and
//! per-sample results.
//!
//! All geometry lives in a resolution-independent integer grid `[0, 1000]²`
//! with the origin at the top-left corner.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the canonical normalized grid.
pub const GRID_MAX: u16 = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("unknown phase letter {0:?}; expected one of A, B, C, D")]
    UnknownLetter(char),
    #[error("invalid box [{xmin}, {ymin}, {xmax}, {ymax}]: need 0 <= min < max <= 1000 on both axes")]
    InvalidBox {
        xmin: i64,
        ymin: i64,
        xmax: i64,
        ymax: i64,
    },
    #[error("invalid pixel box ({x0}, {y0}, {x1}, {y1}) for a {width}x{height} image")]
    InvalidPixelBox {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        width: u32,
        height: u32,
    },
}

/// The four procedural phases of the annotated cholecystectomy workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SurgicalPhase {
    PreparationOfGoZone,
    DissectionOfCalotsTriangle,
    ClipAndDivide,
    GallbladderDissection,
}

impl SurgicalPhase {
    /// All phases in canonical (letter) order.
    pub const ALL: [SurgicalPhase; 4] = [
        SurgicalPhase::PreparationOfGoZone,
        SurgicalPhase::DissectionOfCalotsTriangle,
        SurgicalPhase::ClipAndDivide,
        SurgicalPhase::GallbladderDissection,
    ];

    pub fn letter(self) -> char {
        match self {
            SurgicalPhase::PreparationOfGoZone => 'A',
            SurgicalPhase::DissectionOfCalotsTriangle => 'B',
            SurgicalPhase::ClipAndDivide => 'C',
            SurgicalPhase::GallbladderDissection => 'D',
        }
    }

    /// Case-insensitive inverse of [`SurgicalPhase::letter`].
    pub fn from_letter(letter: char) -> Result<Self, DomainError> {
        match letter.to_ascii_uppercase() {
            'A' => Ok(SurgicalPhase::PreparationOfGoZone),
            'B' => Ok(SurgicalPhase::DissectionOfCalotsTriangle),
            'C' => Ok(SurgicalPhase::ClipAndDivide),
            'D' => Ok(SurgicalPhase::GallbladderDissection),
            _ => Err(DomainError::UnknownLetter(letter)),
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            SurgicalPhase::PreparationOfGoZone => "Preparation of the Go Zone",
            SurgicalPhase::DissectionOfCalotsTriangle => "Dissection of Calot's Triangle",
            SurgicalPhase::ClipAndDivide => "Clip and Divide",
            SurgicalPhase::GallbladderDissection => "Gallbladder Dissection from Liver Bed",
        }
    }

    /// Row/column index used by transition matrices.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SurgicalPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// Convenience wrapper around [`SurgicalPhase::from_letter`].
pub fn phase_from_letter(letter: char) -> Result<SurgicalPhase, DomainError> {
    SurgicalPhase::from_letter(letter)
}

/// Axis-aligned rectangle in the canonical grid.
///
/// Construction always goes through [`BoundingBox::new`], so every value
/// satisfies `0 <= min < max <= 1000` on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[u16; 4]")]
pub struct BoundingBox {
    xmin: u16,
    ymin: u16,
    xmax: u16,
    ymax: u16,
}

impl BoundingBox {
    pub fn new(xmin: i64, ymin: i64, xmax: i64, ymax: i64) -> Result<Self, DomainError> {
        let max = i64::from(GRID_MAX);
        let ok = (0..=max).contains(&xmin)
            && (0..=max).contains(&ymin)
            && xmin < xmax
            && ymin < ymax
            && xmax <= max
            && ymax <= max;
        if !ok {
            return Err(DomainError::InvalidBox {
                xmin,
                ymin,
                xmax,
                ymax,
            });
        }
        Ok(Self {
            xmin: xmin as u16,
            ymin: ymin as u16,
            xmax: xmax as u16,
            ymax: ymax as u16,
        })
    }

    pub fn xmin(&self) -> u16 {
        self.xmin
    }
    pub fn ymin(&self) -> u16 {
        self.ymin
    }
    pub fn xmax(&self) -> u16 {
        self.xmax
    }
    pub fn ymax(&self) -> u16 {
        self.ymax
    }

    pub fn as_array(&self) -> [u16; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn width(&self) -> u32 {
        u32::from(self.xmax - self.xmin)
    }

    pub fn height(&self) -> u32 {
        u32::from(self.ymax - self.ymin)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (f64::from(self.xmin) + f64::from(self.xmax)) / 2.0,
            (f64::from(self.ymin) + f64::from(self.ymax)) / 2.0,
        )
    }

    /// Area of the overlap with `other`, zero when disjoint or only touching.
    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let w = self.xmax.min(other.xmax).saturating_sub(self.xmin.max(other.xmin));
        let h = self.ymax.min(other.ymax).saturating_sub(self.ymin.max(other.ymin));
        u64::from(w) * u64::from(h)
    }
}

impl TryFrom<[i64; 4]> for BoundingBox {
    type Error = DomainError;

    fn try_from(v: [i64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [u16; 4] {
    fn from(b: BoundingBox) -> Self {
        b.as_array()
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.xmin, self.ymin, self.xmax, self.ymax
        )
    }
}

/// Round half-up to the nearest integer.
pub(crate) fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Widen a collapsed `[lo, hi]` interval by one grid unit, staying in range.
fn widen_axis(lo: i64, hi: i64) -> (i64, i64) {
    let max = i64::from(GRID_MAX);
    if lo < hi {
        (lo, hi)
    } else if hi < max {
        (lo, hi + 1)
    } else {
        (lo - 1, hi)
    }
}

/// Convert a pixel-space rectangle into the canonical grid.
///
/// Coordinates are scaled per axis, rounded half-up and clamped to
/// `[0, 1000]`; an axis that collapses after rounding is widened by one unit.
pub fn bbox_from_pixels(
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    width_px: u32,
    height_px: u32,
) -> Result<BoundingBox, DomainError> {
    let w = f64::from(width_px);
    let h = f64::from(height_px);
    let valid = width_px > 0
        && height_px > 0
        && [x0, y0, x1, y1].iter().all(|v| v.is_finite())
        && 0.0 <= x0
        && x0 < x1
        && x1 <= w
        && 0.0 <= y0
        && y0 < y1
        && y1 <= h;
    if !valid {
        return Err(DomainError::InvalidPixelBox {
            x0,
            y0,
            x1,
            y1,
            width: width_px,
            height: height_px,
        });
    }
    let max = i64::from(GRID_MAX);
    let scale = |v: f64, extent: f64| round_half_up(v * f64::from(GRID_MAX) / extent).clamp(0, max);
    let (xmin, xmax) = widen_axis(scale(x0, w), scale(x1, w));
    let (ymin, ymax) = widen_axis(scale(y0, h), scale(y1, h));
    BoundingBox::new(xmin, ymin, xmax, ymax)
}

/// Lowercase, replace anything non-alphanumeric with spaces and collapse runs
/// of whitespace. Used for entity sets and reward text matching alike.
pub fn normalize_text(text: &str) -> String {
    let mapped: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalize an entity list: apply [`normalize_text`], drop empties and
/// duplicates, keep first-seen order.
pub fn normalize_entities<I, S>(entities: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out: Vec<String> = Vec::new();
    for e in entities {
        let n = normalize_text(e.as_ref());
        if !n.is_empty() && !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

/// One annotated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSample {
    pub sample_id: String,
    pub video_id: String,
    pub frame_index: u64,
    pub image_ref: String,
    pub image_width_px: u32,
    pub image_height_px: u32,
    pub phase: SurgicalPhase,
    pub go_zone: BoundingBox,
    pub anatomic_text: String,
    pub exposure_text: String,
    pub next_action_text: String,
    pub risk_text: String,
    #[serde(default)]
    pub entity_set: Vec<String>,
}

impl FrameSample {
    /// Check the per-sample invariants, returning a description of every
    /// breach found.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.sample_id.trim().is_empty() {
            out.push("sample_id is empty".to_string());
        }
        if self.video_id.trim().is_empty() {
            out.push("video_id is empty".to_string());
        }
        if self.image_width_px == 0 || self.image_height_px == 0 {
            out.push("image dimensions must be positive".to_string());
        }
        for (name, text) in [
            ("anatomic_text", &self.anatomic_text),
            ("exposure_text", &self.exposure_text),
            ("next_action_text", &self.next_action_text),
            ("risk_text", &self.risk_text),
        ] {
            if text.trim().is_empty() {
                out.push(format!("{name} is empty"));
            }
        }
        if normalize_entities(&self.entity_set) != self.entity_set {
            out.push("entity_set is not normalized (lowercase, single-spaced, unique)".to_string());
        }
        out
    }

    /// All four annotation texts joined, the ground truth reasoning source.
    pub fn annotation_text(&self) -> String {
        [
            self.anatomic_text.as_str(),
            self.exposure_text.as_str(),
            self.next_action_text.as_str(),
            self.risk_text.as_str(),
        ]
        .join("\n")
    }
}

/// Parsed phase-question answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn1Output {
    pub raw_text: String,
    pub choice_letter: Option<char>,
    pub predicted_phase: Option<SurgicalPhase>,
}

impl Turn1Output {
    pub fn from_letter(raw_text: impl Into<String>, letter: Option<char>) -> Self {
        let letter = letter.map(|c| c.to_ascii_uppercase());
        let predicted_phase = letter.and_then(|c| SurgicalPhase::from_letter(c).ok());
        Self {
            raw_text: raw_text.into(),
            choice_letter: predicted_phase.map(SurgicalPhase::letter),
            predicted_phase,
        }
    }
}

/// Parsed reasoning-and-grounding answer.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Turn2Output {
    pub raw_text: String,
    pub thinking_text: Option<String>,
    pub location_text: Option<String>,
    pub exposure_text: Option<String>,
    pub next_action_text: Option<String>,
    pub risk_text: Option<String>,
    pub predicted_box: Option<BoundingBox>,
    pub format_valid: bool,
}

impl Turn2Output {
    /// Whether every structured field is populated.
    pub fn is_complete(&self) -> bool {
        self.thinking_text.is_some()
            && self.location_text.is_some()
            && self.exposure_text.is_some()
            && self.next_action_text.is_some()
            && self.risk_text.is_some()
            && self.predicted_box.is_some()
    }

    /// The four reasoning fields that are present, newline-joined.
    pub fn reasoning_text(&self) -> String {
        [
            &self.location_text,
            &self.exposure_text,
            &self.next_action_text,
            &self.risk_text,
        ]
        .into_iter()
        .flatten()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join("\n")
    }
}

/// Individual reward components for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: f64,
    pub format: f64,
    pub reason: f64,
    pub iou: f64,
    pub dist: f64,
}

/// Joined per-sample record feeding the aggregate metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSampleEvaluation {
    pub sample_id: String,
    pub predicted_phase: Option<SurgicalPhase>,
    pub phase_correct: bool,
    pub predicted_box: Option<BoundingBox>,
    pub iou: f64,
    pub center_distance_pct: f64,
    pub rewards: RewardBreakdown,
}

impl PerSampleEvaluation {
    /// Worst-case record used for failed or missing samples.
    pub fn worst_case(sample_id: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            predicted_phase: None,
            phase_correct: false,
            predicted_box: None,
            iou: 0.0,
            center_distance_pct: 100.0,
            rewards: RewardBreakdown::default(),
        }
    }
}
