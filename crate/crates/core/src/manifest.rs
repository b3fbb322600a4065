//! Frame manifests: the JSON-lines stream that replay consumes.
//!
//! Each line is an object whose `record` field selects its kind:
//!
//! ```text
//! {"record":"frame","frame_id":"f1","captured_at":1000,"lat":42.36,"lon":-71.09,"embedding":"<b64 f32le>","truth_label":"desk"}
//! {"record":"detection","frame_id":"f1","kind":"face","confidence":0.9,"box":{"x":0.1,"y":0.1,"w":0.2,"h":0.2},"embedding":"...","truth_person":"ana"}
//! {"record":"session_start","at":900,"session_kind":"context","label":"desk"}
//! {"record":"session_stop","at":1500}
//! {"record":"label","at":2000,"frame_id":"f7","label":"kitchen"}
//! {"record":"recluster","at":2100}
//! ```
//!
//! Frames carry either an inline embedding or base-64 `payload` bytes (or
//! neither, when the embedding comes from a precomputed source). Detection
//! lines carry no timestamp; every other line must be in non-decreasing time
//! order. Frame ids are unique.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::b64;
use crate::cluster::geo_bin;
use crate::detection::{validate_detection, Detection, DetectionKind, Vocabulary};
use crate::embedding::{normalize, FramePayload};
use crate::pipeline::{Command, LabelTarget, SessionKind};
use crate::record::{Activity, FrameRecord, FrameSource};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct SchemaError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameLine {
    pub frame_id: String,
    pub captured_at: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heart_rate_bpm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activity: Option<Activity>,
    /// Base-64 of little-endian f32 values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<String>,
    /// Base-64 of the raw frame bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_cluster: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    #[serde(flatten)]
    pub detection: Detection,
    /// Face crop embedding, base-64 f32 like frame embeddings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<String>,
    /// Expected identity of a face; `<unknown>` expects rejection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_person: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelLine {
    pub at: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dismiss: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ManifestLine {
    Frame(FrameLine),
    Detection(DetectionLine),
    SessionStart { at: i64, session_kind: SessionKind, label: String },
    SessionStop { at: i64 },
    Label(LabelLine),
    Recluster {
        at: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        since: Option<i64>,
    },
}

impl ManifestLine {
    pub fn timestamp(&self) -> Option<i64> {
        match self {
            ManifestLine::Frame(f) => Some(f.captured_at),
            ManifestLine::Detection(_) => None,
            ManifestLine::SessionStart { at, .. }
            | ManifestLine::SessionStop { at }
            | ManifestLine::Recluster { at, .. }
            | ManifestLine::Label(LabelLine { at, .. }) => Some(*at),
        }
    }

    /// The pipeline command for this line. Detection lines map to `None`;
    /// they are registered with [`crate::pipeline::Pipeline::add_detection`].
    pub fn to_command(&self) -> Result<Option<Command>, String> {
        Ok(Some(match self {
            ManifestLine::Detection(_) => return Ok(None),
            ManifestLine::Frame(f) => Command::Frame(Box::new(f.to_record()?)),
            ManifestLine::SessionStart { at, session_kind, label } => {
                Command::StartSession { kind: *session_kind, label: label.clone(), at: *at }
            }
            ManifestLine::SessionStop { at } => Command::StopSession { at: *at },
            ManifestLine::Label(l) => Command::Label {
                target: match (&l.request_id, &l.frame_id) {
                    (Some(r), _) => LabelTarget::Request(r.clone()),
                    (None, f) => LabelTarget::Frame(f.clone().unwrap_or_default()),
                },
                label: l.label.clone(),
                dismiss: l.dismiss,
                at: l.at,
            },
            ManifestLine::Recluster { at, since } => Command::Recluster { at: *at, since: *since },
        }))
    }
}

impl FrameLine {
    pub fn new(frame_id: impl Into<String>, captured_at: i64) -> Self {
        FrameLine {
            frame_id: frame_id.into(),
            captured_at,
            lat: None,
            lon: None,
            heart_rate_bpm: None,
            activity: None,
            embedding: None,
            payload: None,
            truth_label: None,
            truth_cluster: None,
        }
    }

    /// Builds the pipeline record. Inline embeddings are re-normalized.
    pub fn to_record(&self) -> Result<FrameRecord, String> {
        let source = match (&self.embedding, &self.payload) {
            (Some(_), Some(_)) => return Err("frame has both embedding and payload".into()),
            (Some(e), None) => {
                let values = b64::decode_f32(e)?;
                FrameSource::Embedding(normalize(&values).map_err(|e| e.to_string())?)
            }
            (None, Some(p)) => {
                let bytes = b64::decode(p).map_err(|e| e.to_string())?;
                FrameSource::Payload(FramePayload::new(self.frame_id.clone(), bytes, self.captured_at))
            }
            (None, None) => FrameSource::Payload(FramePayload::new(self.frame_id.clone(), Vec::new(), self.captured_at)),
        };
        Ok(FrameRecord {
            frame_id: self.frame_id.clone(),
            captured_at: self.captured_at,
            source,
            lat: self.lat,
            lon: self.lon,
            heart_rate_bpm: self.heart_rate_bpm,
            activity: self.activity,
            truth_label: self.truth_label.clone(),
            truth_cluster: self.truth_cluster.clone(),
        })
    }
}

impl DetectionLine {
    pub fn crop_embedding(&self) -> Result<Option<Vec<f64>>, String> {
        self.embedding.as_deref().map(b64::decode_f32).transpose()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub lines: Vec<ManifestLine>,
}

impl Manifest {
    /// Parses and validates a JSON-lines manifest. Blank lines are skipped
    /// but still counted for line numbers.
    pub fn parse(text: &str) -> Result<Self, SchemaError> {
        let mut lines = Vec::new();
        let mut numbers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: ManifestLine =
                serde_json::from_str(raw).map_err(|e| SchemaError { line: i + 1, message: e.to_string() })?;
            lines.push(line);
            numbers.push(i + 1);
        }
        let m = Manifest { lines };
        m.validate_numbered(&numbers)?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let numbers: Vec<usize> = (1..=self.lines.len()).collect();
        self.validate_numbered(&numbers)
    }

    fn validate_numbered(&self, numbers: &[usize]) -> Result<(), SchemaError> {
        let vocab = Vocabulary::coco90();
        let mut last: Option<i64> = None;
        let mut ids = HashSet::new();
        let mut dim: Option<usize> = None;
        for (line, &n) in self.lines.iter().zip(numbers) {
            let fail = |message: String| SchemaError { line: n, message };
            if let Some(t) = line.timestamp() {
                if let Some(l) = last.filter(|&l| t < l) {
                    return Err(fail(format!("timestamp {t} precedes {l}")));
                }
                last = Some(t);
            }
            let mut check_dim = |len: usize| -> Result<(), SchemaError> {
                match dim {
                    Some(d) if d != len => Err(fail(format!("embedding has {len} values, earlier lines have {d}"))),
                    _ => {
                        dim = Some(len);
                        Ok(())
                    }
                }
            };
            match line {
                ManifestLine::Frame(f) => {
                    if f.frame_id.is_empty() {
                        return Err(fail("empty frame_id".into()));
                    }
                    if !ids.insert(f.frame_id.as_str()) {
                        return Err(fail(format!("duplicate frame_id `{}`", f.frame_id)));
                    }
                    match (f.lat, f.lon) {
                        (Some(lat), Some(lon)) => {
                            geo_bin(lat, lon, 0).map_err(|e| fail(e.to_string()))?;
                        }
                        (None, None) => {}
                        _ => return Err(fail("lat and lon must be given together".into())),
                    }
                    if f.heart_rate_bpm.is_some_and(|h| !(h.is_finite() && h > 0.0)) {
                        return Err(fail("heart_rate_bpm must be positive".into()));
                    }
                    let record = f.to_record().map_err(fail)?;
                    if let FrameSource::Embedding(e) = &record.source {
                        check_dim(e.dim())?;
                    }
                }
                ManifestLine::Detection(d) => {
                    validate_detection(&d.detection, &vocab).map_err(|e| fail(e.to_string()))?;
                    if let Some(v) = d.crop_embedding().map_err(fail)? {
                        if d.detection.kind != DetectionKind::Face {
                            return Err(fail("only face detections carry an embedding".into()));
                        }
                        normalize(&v).map_err(|e| fail(e.to_string()))?;
                        check_dim(v.len())?;
                    }
                    if d.truth_person.is_some() && d.detection.kind != DetectionKind::Face {
                        return Err(fail("truth_person on a non-face detection".into()));
                    }
                }
                ManifestLine::SessionStart { label, .. } if label.trim().is_empty() => {
                    return Err(fail("session label is empty".into()));
                }
                ManifestLine::Label(l) => {
                    if l.request_id.is_some() == l.frame_id.is_some() {
                        return Err(fail("label line needs exactly one of request_id or frame_id".into()));
                    }
                    if l.dismiss == l.label.is_some() {
                        return Err(fail("label line needs exactly one of label or dismiss".into()));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&serde_json::to_string(line).expect("manifest lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameLine> {
        self.lines.iter().filter_map(|l| match l {
            ManifestLine::Frame(f) => Some(f),
            _ => None,
        })
    }

    pub fn detections(&self) -> impl Iterator<Item = &DetectionLine> {
        self.lines.iter().filter_map(|l| match l {
            ManifestLine::Detection(d) => Some(d),
            _ => None,
        })
    }
}
