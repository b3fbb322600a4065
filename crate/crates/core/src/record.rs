//! Multimodal frame records as ingested by the pipeline.

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, FramePayload};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    Still,
    Walking,
    Running,
    Cycling,
    Unknown,
}

/// Where the frame's embedding comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameSource {
    Payload(FramePayload),
    Embedding(Embedding),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_id: String,
    pub captured_at: i64,
    pub source: FrameSource,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub heart_rate_bpm: Option<f64>,
    pub activity: Option<Activity>,
    /// Expected context label; evaluation only.
    pub truth_label: Option<String>,
    /// Planted cluster group; evaluation only.
    pub truth_cluster: Option<String>,
}

impl FrameRecord {
    pub fn from_embedding(frame_id: impl Into<String>, captured_at: i64, embedding: Embedding) -> Self {
        FrameRecord {
            frame_id: frame_id.into(),
            captured_at,
            source: FrameSource::Embedding(embedding),
            lat: None,
            lon: None,
            heart_rate_bpm: None,
            activity: None,
            truth_label: None,
            truth_cluster: None,
        }
    }

    pub fn from_payload(payload: FramePayload) -> Self {
        FrameRecord {
            frame_id: payload.frame_id.clone(),
            captured_at: payload.captured_at,
            source: FrameSource::Payload(payload),
            lat: None,
            lon: None,
            heart_rate_bpm: None,
            activity: None,
            truth_label: None,
            truth_cluster: None,
        }
    }

    pub fn with_geo(mut self, lat: f64, lon: f64) -> Self {
        self.lat = Some(lat);
        self.lon = Some(lon);
        self
    }

    /// Payload view used for detection lookup and face crops.
    pub fn payload(&self) -> FramePayload {
        match &self.source {
            FrameSource::Payload(p) => p.clone(),
            FrameSource::Embedding(_) => FramePayload::new(self.frame_id.clone(), Vec::new(), self.captured_at),
        }
    }
}
