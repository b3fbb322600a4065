//! Generic object and face detections.
//!
//! No detector runs here. Backends return recorded detections; the replay
//! backend is a pure lookup over the frame manifest, validated at ingest
//! against the 90-category object vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embedding::FramePayload;

const COCO90: &str = include_str!("../assets/coco90.txt");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectionError {
    #[error("unknown detection backend `{0}`")]
    UnknownBackend(String),
    #[error("invalid detection for frame `{frame_id}`: {reason}")]
    Schema { frame_id: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionKind {
    Object,
    Face,
}

/// Normalized rectangle; origin top-left, all fields in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.x) && unit(self.y) && unit(self.w) && unit(self.h) && self.x + self.w <= 1.0 + 1e-9 && self.y + self.h <= 1.0 + 1e-9
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4},{:.4},{:.4},{:.4}", self.x, self.y, self.w, self.h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_id: String,
    pub kind: DetectionKind,
    #[serde(default)]
    pub label: String,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Confidence descending, then label, then box coordinates.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.label.cmp(&b.label))
            .then_with(|| a.kind.cmp(&b.kind))
            .then_with(|| a.bbox.x.total_cmp(&b.bbox.x))
            .then_with(|| a.bbox.y.total_cmp(&b.bbox.y))
            .then_with(|| a.bbox.w.total_cmp(&b.bbox.w))
            .then_with(|| a.bbox.h.total_cmp(&b.bbox.h))
    });
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary(BTreeSet<String>);

impl Vocabulary {
    /// The 90 object categories of the COCO detection label map.
    pub fn coco90() -> Self {
        Self::from_lines(COCO90)
    }

    /// One category per line; blank lines and `#` comments are skipped.
    pub fn from_lines(text: &str) -> Self {
        Vocabulary(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect(),
        )
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.contains(label)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::coco90()
    }
}

pub fn validate_detection(det: &Detection, vocab: &Vocabulary) -> Result<(), DetectionError> {
    let fail = |reason: String| Err(DetectionError::Schema { frame_id: det.frame_id.clone(), reason });
    if !(0.0..=1.0).contains(&det.confidence) {
        return fail(format!("confidence {} outside [0, 1]", det.confidence));
    }
    if !det.bbox.is_valid() {
        return fail(format!("box {} not inside the unit square", det.bbox));
    }
    match det.kind {
        DetectionKind::Object if !vocab.contains(&det.label) => fail(format!("unknown object category `{}`", det.label)),
        DetectionKind::Face if !det.label.is_empty() => fail("face detections carry no label".into()),
        _ => Ok(()),
    }
}

pub trait DetectionBackend: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, frame: &FramePayload) -> Vec<Detection>;
}

/// Recorded detections keyed by frame id.
#[derive(Clone, Debug, Default)]
pub struct ReplayDetections {
    vocab: Vocabulary,
    by_frame: BTreeMap<String, Vec<Detection>>,
}

impl ReplayDetections {
    pub fn new(vocab: Vocabulary) -> Self {
        ReplayDetections { vocab, by_frame: BTreeMap::new() }
    }

    pub fn ingest(&mut self, det: Detection) -> Result<(), DetectionError> {
        validate_detection(&det, &self.vocab)?;
        let list = self.by_frame.entry(det.frame_id.clone()).or_default();
        list.push(det);
        sort_detections(list);
        Ok(())
    }

    pub fn for_frame(&self, frame_id: &str) -> &[Detection] {
        self.by_frame.get(frame_id).map_or(&[], Vec::as_slice)
    }
}

impl DetectionBackend for ReplayDetections {
    fn name(&self) -> &str {
        "replay"
    }

    fn detect(&self, frame: &FramePayload) -> Vec<Detection> {
        self.for_frame(&frame.frame_id).to_vec()
    }
}

pub struct DetectionGateway {
    backends: BTreeMap<String, Box<dyn DetectionBackend>>,
}

impl DetectionGateway {
    pub fn new() -> Self {
        DetectionGateway { backends: BTreeMap::new() }
    }

    pub fn register(&mut self, backend: Box<dyn DetectionBackend>) {
        self.backends.insert(backend.name().to_string(), backend);
    }

    pub fn detect(&self, frame: &FramePayload, backend: &str) -> Result<Vec<Detection>, DetectionError> {
        let b = self.backends.get(backend).ok_or_else(|| DetectionError::UnknownBackend(backend.to_string()))?;
        let mut dets = b.detect(frame);
        sort_detections(&mut dets);
        Ok(dets)
    }
}

impl Default for DetectionGateway {
    fn default() -> Self {
        let mut g = Self::new();
        g.register(Box::new(ReplayDetections::default()));
        g
    }
}

impl fmt::Debug for DetectionGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DetectionGateway").field("backends", &self.backends.keys().collect::<Vec<_>>()).finish()
    }
}

/// Ids of the face crops [`face_crops`] would produce, in the same order.
pub fn face_crop_ids(frame_id: &str, detections: &[Detection]) -> Vec<String> {
    let mut ids: Vec<String> = Vec::new();
    for d in detections.iter().filter(|d| d.kind == DetectionKind::Face) {
        let base = format!("{frame_id}#face@{}", d.bbox);
        let mut id = base.clone();
        let mut n = 1;
        while ids.contains(&id) {
            id = format!("{base}~{n}");
            n += 1;
        }
        ids.push(id);
    }
    ids
}

/// One synthetic payload per face detection; its bytes are the frame bytes
/// (or the frame id when no bytes were retained) followed by the box.
pub fn face_crops(frame: &FramePayload, detections: &[Detection]) -> Vec<FramePayload> {
    let ids = face_crop_ids(&frame.frame_id, detections);
    detections
        .iter()
        .filter(|d| d.kind == DetectionKind::Face)
        .zip(ids)
        .map(|(d, id)| {
            let mut bytes = if frame.bytes.is_empty() { frame.frame_id.as_bytes().to_vec() } else { frame.bytes.clone() };
            bytes.push(b'#');
            for v in [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            FramePayload { frame_id: id, bytes, captured_at: frame.captured_at }
        })
        .collect()
}
