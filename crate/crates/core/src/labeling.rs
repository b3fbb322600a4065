//! Human-in-the-loop label requests.
//!
//! Clusters, unknown faces and low-margin context predictions become
//! [`LabelRequest`]s. Request ids are content-derived, so re-clustering the
//! same data yields the same ids and decided requests are never re-asked.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{ClusterReport, GeoBin};
use crate::UNKNOWN_LABEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RequestKind {
    Cluster,
    Face,
    Context,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RequestStatus {
    Pending,
    Labeled,
    Dismissed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub request_id: String,
    pub kind: RequestKind,
    pub exemplar_frame_ids: Vec<String>,
    pub bin: Option<GeoBin>,
    pub status: RequestStatus,
    pub suggested_label: Option<String>,
    pub member_count: usize,
    /// Newest capture time among the request's bin frames; drives ordering.
    pub last_seen: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDecision {
    pub request_id: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub dismiss: bool,
    #[serde(default)]
    pub decided_at: i64,
}

impl LabelDecision {
    pub fn label(request_id: impl Into<String>, label: impl Into<String>, decided_at: i64) -> Self {
        LabelDecision { request_id: request_id.into(), label: Some(label.into()), dismiss: false, decided_at }
    }

    pub fn dismissal(request_id: impl Into<String>, decided_at: i64) -> Self {
        LabelDecision { request_id: request_id.into(), label: None, dismiss: true, decided_at }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabelError {
    #[error("unknown label request `{0}`")]
    UnknownRequest(String),
    #[error("label request `{0}` is not pending")]
    NotPending(String),
    #[error("label must be non-empty and not the reserved `{UNKNOWN_LABEL}`")]
    EmptyLabel,
}

fn short_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn cluster_request_id(bin: &GeoBin, medoid_frame_id: &str) -> String {
    format!("c-{}", short_hash(&["cluster", &bin.to_string(), medoid_frame_id]))
}

pub fn face_request_id(medoid_crop_id: &str) -> String {
    format!("f-{}", short_hash(&["face", medoid_crop_id]))
}

pub fn context_request_id(frame_id: &str) -> String {
    format!("x-{}", short_hash(&["context", frame_id]))
}

/// One request per cluster that has not been labeled or dismissed yet.
pub fn make_label_requests(report: &ClusterReport, queue: &LabelQueue) -> Vec<LabelRequest> {
    report
        .clusters
        .iter()
        .map(|c| LabelRequest {
            request_id: cluster_request_id(&report.bin, &c.medoid_frame_id),
            kind: RequestKind::Cluster,
            exemplar_frame_ids: c.exemplar_frame_ids.clone(),
            bin: Some(report.bin.clone()),
            status: RequestStatus::Pending,
            suggested_label: None,
            member_count: c.member_frame_ids.len(),
            last_seen: report.last_seen.unwrap_or_default(),
            decided_label: None,
        })
        .filter(|r| !queue.is_decided(&r.request_id))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    request: LabelRequest,
    /// Frame or crop ids whose embeddings a label decision applies to.
    members: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelQueue {
    entries: BTreeMap<String, Entry>,
    decisions: BTreeMap<String, LabelDecision>,
}

impl LabelQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Restores decided request ids (requests themselves are rebuilt on the
    /// next clustering pass).
    pub fn with_decisions(decisions: BTreeMap<String, LabelDecision>) -> Self {
        LabelQueue { entries: BTreeMap::new(), decisions }
    }

    pub fn decisions(&self) -> &BTreeMap<String, LabelDecision> {
        &self.decisions
    }

    pub fn is_decided(&self, request_id: &str) -> bool {
        self.decisions.contains_key(request_id)
            || self.entries.get(request_id).is_some_and(|e| e.request.status != RequestStatus::Pending)
    }

    pub fn get(&self, request_id: &str) -> Option<&LabelRequest> {
        self.entries.get(request_id).map(|e| &e.request)
    }

    pub fn members(&self, request_id: &str) -> Option<&[String]> {
        self.entries.get(request_id).map(|e| e.members.as_slice())
    }

    /// Inserts or refreshes a pending request. Decided ids are left alone.
    pub fn upsert_pending(&mut self, request: LabelRequest, members: Vec<String>) -> bool {
        if self.is_decided(&request.request_id) {
            return false;
        }
        self.entries.insert(request.request_id.clone(), Entry { request, members });
        true
    }

    /// Drops pending requests of `kind` whose ids are not in `keep`.
    pub fn retain_pending(&mut self, kind: RequestKind, keep: &dyn Fn(&str) -> bool) {
        self.entries.retain(|id, e| {
            e.request.kind != kind || e.request.status != RequestStatus::Pending || keep(id)
        });
    }

    /// Checks that `decision` may be applied, returning the target request.
    pub fn validate(&self, decision: &LabelDecision) -> Result<&LabelRequest, LabelError> {
        let entry = self
            .entries
            .get(&decision.request_id)
            .ok_or_else(|| LabelError::UnknownRequest(decision.request_id.clone()))?;
        if entry.request.status != RequestStatus::Pending {
            return Err(LabelError::NotPending(decision.request_id.clone()));
        }
        if !decision.dismiss {
            match decision.label.as_deref() {
                Some(l) if !l.trim().is_empty() && l != UNKNOWN_LABEL => {}
                _ => return Err(LabelError::EmptyLabel),
            }
        }
        Ok(&entry.request)
    }

    /// Records a validated decision and returns the updated request.
    pub fn mark(&mut self, decision: LabelDecision) -> Result<LabelRequest, LabelError> {
        self.validate(&decision)?;
        let entry = self.entries.get_mut(&decision.request_id).expect("validated");
        if decision.dismiss {
            entry.request.status = RequestStatus::Dismissed;
        } else {
            entry.request.status = RequestStatus::Labeled;
            entry.request.decided_label = decision.label.clone();
        }
        let out = entry.request.clone();
        self.decisions.insert(decision.request_id.clone(), decision);
        Ok(out)
    }

    /// Pending first, then newest bins first, then by id.
    pub fn list(&self, status: Option<RequestStatus>) -> Vec<LabelRequest> {
        let mut out: Vec<LabelRequest> = self
            .entries
            .values()
            .map(|e| e.request.clone())
            .filter(|r| status.is_none_or(|s| r.status == s))
            .collect();
        out.sort_by(|a, b| {
            (a.status != RequestStatus::Pending)
                .cmp(&(b.status != RequestStatus::Pending))
                .then(b.last_seen.cmp(&a.last_seen))
                .then(a.request_id.cmp(&b.request_id))
        });
        out
    }

    /// Finds the pending request whose members include `member_id`.
    pub fn pending_containing(&self, member_id: &str) -> Option<&LabelRequest> {
        self.entries
            .values()
            .filter(|e| e.request.status == RequestStatus::Pending)
            .find(|e| e.members.iter().any(|m| m == member_id))
            .map(|e| &e.request)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
